//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 5 and 7 train three full models and take well over an hour on a
//! single core. `DECIDENET_ACCEPTANCE_STEPS` shortens those runs; the line then
//! says so. Those two depend on training outcomes and are reported without
//! failing the run; every other FAIL exits non-zero.

use std::path::Path;
use std::time::{Duration, Instant};

use decidenet::cli::{cmd_ablate, cmd_synth, RunConfig, ABLATION_FILE, METRICS_FILE};
use decidenet::data_io::{DatasetSpec, Split};
use decidenet::density::{count, gt_density, DensityMap, GaussianKernelSpec, Point, PointSet};
use decidenet::evaluation::{mae, median, mse, population_bins, EvalReport, Variant};
use decidenet::networks::{blend, fuse_on_tape, AttentionMap, QualityNetConfig, QualityNetParams, RegNetParams};
use decidenet::numerics::{Tape, Tensor};
use decidenet::training::{crop_patches, loss_qua, loss_reg, train_phase, Phase, TrainConfig, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;
const FD_TOLERANCE: f64 = 1e-4;
const FD_PARAMS: usize = 24;
const FD_BUDGET: Duration = Duration::from_secs(120);
const COUNT_SCENES: usize = 1000;
const BLEND_TRIPLES: usize = 1000;
const BLEND_TOLERANCE: f64 = 1e-12;
const TREND_SCENES: usize = 500;
const TABLE_STEPS: u64 = 20_000;
const TABLE_SEEDS: [u64; 3] = [0, 1, 2];
/// K on RegNet's output grid.
const TABLE_STRIDE: usize = 4;
const TABLE_BUDGET: Duration = Duration::from_secs(20 * 60);
const TERCILE_MARGIN: f64 = 0.5;
const DETERMINISM_STEPS: u64 = 500;
const REPORTED_ONLY: [usize; 2] = [5, 7];

struct Verdict {
    pass: bool,
    detail: String,
    /// Host-dependent timing target, reported but not fatal.
    timing: Option<(bool, String)>,
}

impl Verdict {
    fn new(pass: bool, detail: String) -> Self {
        Verdict {
            pass,
            detail,
            timing: None,
        }
    }

    fn timed(mut self, elapsed: Duration, budget: Duration) -> Self {
        self.timing = Some((
            elapsed < budget,
            format!("runtime {:.1} s (target < {} s)", elapsed.as_secs_f64(), budget.as_secs()),
        ));
        self
    }
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Worst relative error over `FD_PARAMS` random coordinates with a nonzero
/// analytic gradient, or `None` when too few such coordinates exist.
fn fd_worst(
    params: &mut [&mut Tensor],
    analytic: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
    mut loss: impl FnMut(&[Vec<f64>]) -> f64,
) -> Option<f64> {
    let live: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(l, g)| g.iter().enumerate().filter(|(_, v)| **v != 0.0).map(move |(i, _)| (l, i)))
        .collect();
    if live.len() < FD_PARAMS {
        return None;
    }
    let mut values: Vec<Vec<f64>> = params.iter().map(|t| t.values().to_vec()).collect();
    let mut worst = 0.0f64;
    for &(layer, i) in rand::seq::index::sample(rng, live.len(), FD_PARAMS).iter().map(|k| &live[k]) {
        let orig = values[layer][i];
        values[layer][i] = orig + FD_STEP;
        let up = loss(&values);
        values[layer][i] = orig - FD_STEP;
        let down = loss(&values);
        values[layer][i] = orig;
        worst = worst.max(relative_error(analytic[layer][i], (up - down) / (2.0 * FD_STEP)));
    }
    for (t, v) in params.iter_mut().zip(values) {
        t.values_mut().copy_from_slice(&v);
    }
    Some(worst)
}

fn with_values<T: Clone>(net: &T, values: &[Vec<f64>], params: impl Fn(&mut T) -> Vec<&mut Tensor>) -> T {
    let mut out = net.clone();
    for (t, v) in params(&mut out).into_iter().zip(values) {
        t.values_mut().copy_from_slice(v);
    }
    out
}

fn grads_of(params: Vec<&mut Tensor>) -> Vec<Vec<f64>> {
    params.into_iter().map(|t| t.grad().expect("gradient stored").to_vec()).collect()
}

fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen::<f64>() * scale)
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut regnet = RegNetParams::init(3, &mut rng);
    regnet.conv5.bias.values_mut().fill(0.1);
    regnet.conv5.weight.values_mut().iter_mut().for_each(|w| *w = w.abs());
    let head = QualityNetParams::init(&QualityNetConfig::default(), &mut rng).unwrap();
    let x = random(&[2, 3, 16, 16], 1.0, &mut rng);
    let gt = random(&[2, 1, 4, 4], 0.1, &mut rng);
    let img = random(&[2, 3, 4, 4], 1.0, &mut rng);
    let det = random(&[2, 1, 4, 4], 0.1, &mut rng);
    let score = random(&[2, 1, 4, 4], 1.0, &mut rng);

    let eval_reg = |net: &RegNetParams, grads: Option<&mut RegNetParams>| {
        let mut tape = Tape::new();
        let b = net.bind(&mut tape);
        let (xv, gv) = (tape.leaf(&x), tape.leaf(&gt));
        let y = net.forward(&mut tape, &b, xv).unwrap();
        let l = loss_reg(&mut tape, y, gv).unwrap();
        if let Some(g) = grads {
            tape.backward(l).unwrap();
            g.store_grads(&tape, &b).unwrap();
        }
        tape.value(l)[0]
    };
    // loss_qua with RegNet live under the fusion, so both networks receive gradient
    let eval_qua = |net: &RegNetParams, q: &QualityNetParams, grads: Option<(&mut RegNetParams, &mut QualityNetParams)>| {
        let mut tape = Tape::new();
        let rb = net.bind(&mut tape);
        let qb = q.bind(&mut tape);
        let xv = tape.leaf(&x);
        let reg = net.forward(&mut tape, &rb, xv).unwrap();
        let (iv, dv, gv, sv) = (tape.leaf(&img), tape.leaf(&det), tape.leaf(&gt), tape.leaf(&score));
        let f = fuse_on_tape(&mut tape, q, &qb, iv, dv, reg).unwrap();
        let l = loss_qua(&mut tape, f.blended, gv, f.attention, sv, 1.0).unwrap();
        if let Some((gr, gq)) = grads {
            tape.backward(l).unwrap();
            gr.store_grads(&tape, &rb).unwrap();
            gq.store_grads(&tape, &qb).unwrap();
        }
        tape.value(l)[0]
    };

    let mut reg_grads = regnet.clone();
    eval_reg(&regnet, Some(&mut reg_grads));
    let analytic = grads_of(reg_grads.params_mut());
    let mut probe = regnet.clone();
    let reg_reg = fd_worst(&mut probe.params_mut(), &analytic, &mut rng, |v| {
        eval_reg(&with_values(&regnet, v, RegNetParams::params_mut), None)
    });

    let (mut gr, mut gq) = (regnet.clone(), head.clone());
    eval_qua(&regnet, &head, Some((&mut gr, &mut gq)));
    let (analytic_r, analytic_q) = (grads_of(gr.params_mut()), grads_of(gq.params_mut()));
    let mut probe = regnet.clone();
    let reg_qua = fd_worst(&mut probe.params_mut(), &analytic_r, &mut rng, |v| {
        eval_qua(&with_values(&regnet, v, RegNetParams::params_mut), &head, None)
    });
    let mut probe = head.clone();
    let head_qua = fd_worst(&mut probe.params_mut(), &analytic_q, &mut rng, |v| {
        eval_qua(&regnet, &with_values(&head, v, QualityNetParams::params_mut), None)
    });

    let all = [reg_reg, reg_qua, head_qua];
    let worst = all.iter().flatten().copied().fold(0.0, f64::max);
    let shown = all.map(|w| w.map_or("too few live gradients".into(), |w| format!("{w:.2e}")));
    Verdict::new(
        all.iter().all(|w| w.is_some()) && worst < FD_TOLERANCE,
        format!(
            "max rel err {worst:.2e} (RegNet/loss_reg {}, RegNet/loss_qua {}, QualityNet/loss_qua {}; {FD_PARAMS} params each, tol {FD_TOLERANCE:e})",
            shown[0], shown[1], shown[2]
        ),
    )
    .timed(start.elapsed(), FD_BUDGET)
}

fn criterion_2() -> Verdict {
    let kernel = GaussianKernelSpec::default();
    let (h, w) = (96usize, 128usize);
    let margin = (kernel.window / 2 + 1) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..COUNT_SCENES {
        let n = rng.gen_range(1..=120);
        let pts = (0..n)
            .map(|_| Point::new(rng.gen_range(margin..w as f64 - margin), rng.gen_range(margin..h as f64 - margin)))
            .collect();
        let d = gt_density(&PointSet(pts), (h, w), &kernel).unwrap();
        worst = worst.max((count(&d) - n as f64).abs() / n as f64);
    }
    Verdict::new(
        worst < 1e-9,
        format!("max |count - n| / n = {worst:.2e} over {COUNT_SCENES} scenes (tol 1e-9)"),
    )
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    let mut bound_ok = true;
    for _ in 0..BLEND_TRIPLES {
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let map = |rng: &mut ChaCha8Rng| DensityMap::new(h, w, (0..h * w).map(|_| rng.gen::<f64>() * 0.2).collect()).unwrap();
        let (det, reg) = (map(&mut rng), map(&mut rng));
        let k = AttentionMap::new(h, w, (0..h * w).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let diff = |a: &DensityMap, b: &[f64]| a.values().iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let avg: Vec<f64> = det.values().iter().zip(reg.values()).map(|(a, b)| 0.5 * (a + b)).collect();
        worst = worst
            .max(diff(&blend(&AttentionMap::filled(h, w, 1.0).unwrap(), &det, &reg).unwrap(), det.values()))
            .max(diff(&blend(&AttentionMap::filled(h, w, 0.0).unwrap(), &det, &reg).unwrap(), reg.values()))
            .max(diff(&blend(&AttentionMap::filled(h, w, 0.5).unwrap(), &det, &reg).unwrap(), &avg));
        let out = blend(&k, &det, &reg).unwrap();
        for i in 0..h * w {
            let (a, b) = (det.values()[i], reg.values()[i]);
            bound_ok &= a.min(b) - BLEND_TOLERANCE <= out.values()[i] && out.values()[i] <= a.max(b) + BLEND_TOLERANCE;
        }
    }
    Verdict::new(
        worst <= BLEND_TOLERANCE && bound_ok,
        format!("max identity deviation {worst:.1e}, convex bound {} over {BLEND_TRIPLES} triples", if bound_ok { "held" } else { "broken" }),
    )
}

fn bits(params: Vec<&mut Tensor>) -> Vec<u64> {
    params.into_iter().flat_map(|t| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}

fn criterion_4() -> Verdict {
    let config = TrainConfig {
        train_plain: true,
        ..TrainConfig::default()
    };
    let scenes = DatasetSpec::default().split(Split::Val).unwrap();
    let mut state = TrainState::init(&config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut checks, mut ok) = (0, true);
    for scene in scenes.iter().take(12) {
        let patches = crop_patches(scene, (config.patch_cols, config.patch_rows), &config.kernel, config.score_default).unwrap();
        let batch: Vec<_> = patches.into_iter().filter(|_| rng.gen_bool(0.75)).collect();
        if batch.is_empty() {
            continue;
        }
        let reg_before = bits(state.regnet.params_mut());
        train_phase(&mut state, &batch, &config, Phase::Attention).unwrap();
        ok &= bits(state.regnet.params_mut()) == reg_before;

        let heads_before = (bits(state.quality.params_mut()), bits(state.plain.as_mut().unwrap().params_mut()));
        train_phase(&mut state, &batch, &config, Phase::Regression).unwrap();
        ok &= (bits(state.quality.params_mut()), bits(state.plain.as_mut().unwrap().params_mut())) == heads_before;
        checks += 2;
    }
    Verdict::new(ok && checks > 0, format!("{checks} alternating updates, untouched network bit-identical: {ok}"))
}

fn acceptance_steps() -> u64 {
    std::env::var("DECIDENET_ACCEPTANCE_STEPS").ok().and_then(|s| s.parse().ok()).unwrap_or(TABLE_STEPS)
}

fn table_config(root: &Path, seed: u64, steps: u64) -> RunConfig {
    let mut c = RunConfig {
        data_dir: root.join("data"),
        out_dir: root.join(format!("seed{seed}")),
        ..RunConfig::default()
    };
    c.set("train.total_steps", &steps.to_string()).unwrap();
    c.set("train.seed", &seed.to_string()).unwrap();
    c.set("train.attention_stride", &TABLE_STRIDE.to_string()).unwrap();
    c
}

fn criteria_5_and_7() -> (Verdict, Verdict) {
    let steps = acceptance_steps();
    let root = tempfile::tempdir().unwrap();
    let start = Instant::now();
    cmd_synth(&table_config(root.path(), 0, steps)).unwrap();
    let reports: Vec<EvalReport> = TABLE_SEEDS
        .iter()
        .map(|&seed| {
            let t = Instant::now();
            let rep = cmd_ablate(&table_config(root.path(), seed, steps), |_| {}).unwrap();
            eprintln!("acceptance: seed {seed} trained and evaluated in {:.0} s", t.elapsed().as_secs_f64());
            rep
        })
        .collect();
    let elapsed = start.elapsed();

    let med = |v: Variant| median(&reports.iter().map(|r| r.aggregate(v).unwrap().mae).collect::<Vec<_>>()).unwrap();
    let [reg, det, late, plain, quality] = Variant::ALL.map(med);
    let ordered = quality <= plain && quality < reg.min(det).min(late);
    let scale = if steps == TABLE_STEPS {
        String::new()
    } else {
        format!(" [reduced: {steps} steps]")
    };
    let five = Verdict::new(
        ordered,
        format!(
            "median MAE over {} seeds: quality {quality:.3}, plain {plain:.3}, reg {reg:.3}, det {det:.3}, late {late:.3}{scale}",
            TABLE_SEEDS.len()
        ),
    )
    .timed(elapsed, TABLE_BUDGET);

    let tercile = |t: usize, v: Variant| {
        median(&reports.iter().map(|r| r.terciles[t].signed(v).unwrap()).collect::<Vec<_>>()).unwrap()
    };
    let top_det = tercile(2, Variant::DetOnly);
    let bottom_reg = tercile(0, Variant::RegOnly);
    let seven = Verdict::new(
        top_det <= 0.0 && bottom_reg >= 0.0 && top_det.abs() > TERCILE_MARGIN && bottom_reg.abs() > TERCILE_MARGIN,
        format!("det_only top-tercile signed error {top_det:+.3}, reg_only bottom-tercile {bottom_reg:+.3} (|err| > {TERCILE_MARGIN}){scale}"),
    );
    (five, seven)
}

fn criterion_6() -> Verdict {
    let spec = DatasetSpec {
        train: TREND_SCENES,
        ..DatasetSpec::default()
    };
    let scenes = spec.split(Split::Train).unwrap();
    let counts: Vec<f64> = scenes.iter().map(|s| s.count() as f64).collect();
    let medians: Vec<Option<f64>> = population_bins(&counts, 8)
        .iter()
        .map(|members| {
            let scores: Vec<f64> = members
                .iter()
                .flat_map(|&j| scenes[j].detections.iter().flat_map(|d| d.iter()).map(|d| d.score))
                .collect();
            median(&scores)
        })
        .collect();
    let defined: Vec<f64> = medians.iter().flatten().copied().collect();
    let monotone = medians.len() == 8 && defined.len() == 8 && defined.windows(2).all(|w| w[1] <= w[0]);
    let shown: Vec<String> = medians.iter().map(|m| m.map_or("-".into(), |v| format!("{v:.3}"))).collect();
    Verdict::new(monotone, format!("octile medians [{}] on {TREND_SCENES} scenes", shown.join(", ")))
}

fn criterion_8() -> Verdict {
    let (a, b) = (mae(&[2.0, 4.0], &[1.0, 1.0]).unwrap(), mse(&[2.0, 4.0], &[1.0, 1.0]).unwrap());
    let hand = (a - 2.0).abs() < 1e-12 && (b - 5f64.sqrt()).abs() < 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut ordered = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..50);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-20.0..80.0)).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..60.0)).collect();
        ordered += usize::from(mae(&p, &g).unwrap() <= mse(&p, &g).unwrap() + 1e-12);
    }
    Verdict::new(hand && ordered == 1000, format!("hand example mae {a}, mse {b:.15}; mae <= mse on {ordered}/1000 vectors"))
}

fn csv_outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn criterion_9() -> Verdict {
    let run = || {
        let root = tempfile::tempdir().unwrap();
        let mut c = table_config(root.path(), 7, DETERMINISM_STEPS);
        c.set("train.eval_interval", &(DETERMINISM_STEPS / 2).to_string()).unwrap();
        cmd_synth(&c).unwrap();
        cmd_ablate(&c, |_| {}).unwrap();
        csv_outputs(&c.out_dir.join("ablate"))
    };
    let (a, b) = (run(), run());
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    let complete = [ABLATION_FILE, METRICS_FILE].iter().all(|f| names.contains(f));
    Verdict::new(
        complete && a == b,
        format!("{} CSV files byte-identical across two ablate runs ({DETERMINISM_STEPS} steps): {}", a.len(), a == b),
    )
}

fn report(n: usize, v: &Verdict) {
    let timing = match &v.timing {
        Some((true, t)) => format!("; {t} met"),
        Some((false, t)) => format!("; {t} MISSED"),
        None => String::new(),
    };
    let status = if v.pass && v.timing.as_ref().is_none_or(|t| t.0) { "PASS" } else { "FAIL" };
    println!("criterion {n}: {status}: {}{timing}", v.detail);
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let (five, seven) = criteria_5_and_7();
    let verdicts = [
        (1, criterion_1()),
        (2, criterion_2()),
        (3, criterion_3()),
        (4, criterion_4()),
        (5, five),
        (6, criterion_6()),
        (7, seven),
        (8, criterion_8()),
        (9, criterion_9()),
    ];
    for (n, v) in &verdicts {
        report(*n, v);
    }
    let broken: Vec<usize> = verdicts
        .iter()
        .filter(|(n, v)| !v.pass && !REPORTED_ONLY.contains(n))
        .map(|(n, _)| *n)
        .collect();
    if !broken.is_empty() {
        eprintln!("acceptance: criteria {broken:?} failed");
        std::process::exit(1);
    }
}
