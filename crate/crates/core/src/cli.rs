//! Run configuration and the `synth`, `train`, `eval`, `ablate`, `trends` commands.

use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::data_io::{load_split, write_dataset, DatasetSpec, Layout, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_model, trend_report, write_file, EvalReport, Model, TrendReport};
use crate::numerics::Checkpoint;
use crate::training::{metrics_csv, train_from, TrainConfig, TrainOutcome, TrainState};

pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.txt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Scene generator, detector profile and split sizes; its kernel mirrors `train.kernel`.
    pub dataset: DatasetSpec,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Checkpoint for `eval` and `trends`; defaults to `out_dir/best.ckpt`.
    pub checkpoint: Option<PathBuf>,
    /// `train` continues from this state instead of a fresh initialisation.
    pub resume: Option<PathBuf>,
    pub eval_split: Split,
    pub rooted_mse: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            dataset: DatasetSpec::default(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            checkpoint: None,
            resume: None,
            eval_split: Split::Test,
            rooted_mse: true,
        }
    }
}

/// Every accepted key with a one-line description, in dump order.
pub const KEYS: &[(&str, &str)] = &[
    ("data_dir", "dataset directory (written by synth, read by the rest)"),
    ("out_dir", "output directory"),
    ("checkpoint", "checkpoint for eval/trends (empty: out_dir/best.ckpt)"),
    ("resume", "checkpoint to resume training from (empty: fresh start)"),
    ("eval_split", "split used by eval and trends"),
    ("rooted_mse", "report MSE as root mean squared error"),
    ("train.lambda", "weight of the attention-to-score term"),
    ("train.lr0", "initial learning rate"),
    ("train.lr_halving_period", "steps between learning-rate halvings"),
    ("train.total_steps", "training steps"),
    ("train.patch_cols", "patch grid columns"),
    ("train.patch_rows", "patch grid rows"),
    ("train.flip_prob", "probability of each flip"),
    ("train.noise_prob", "probability of additive pixel noise"),
    ("train.noise_min", "lower noise bound, 0-255 scale"),
    ("train.noise_max", "upper noise bound, 0-255 scale"),
    ("train.seed", "initialisation, data order and augmentation seed"),
    ("train.eval_interval", "steps between validation passes"),
    ("train.attention_stride", "attention map downsampling (1, 2 or 4)"),
    ("train.qua_grad_to_reg", "let the quality loss update RegNet"),
    ("train.train_plain", "also train a lambda = 0 attention head"),
    ("train.score_default", "score map value away from detections"),
    ("qualitynet.widths", "comma-separated layer widths"),
    ("qualitynet.kernel", "convolution kernel size"),
    ("qualitynet.density_scale", "factor on density channels fed to the attention head"),
    ("kernel.sigma", "Gaussian sigma in pixels"),
    ("kernel.window", "Gaussian window side (odd)"),
    ("kernel.normalized", "renormalise truncated kernels to unit mass"),
    ("scene.height", "scene height in pixels"),
    ("scene.width", "scene width in pixels"),
    ("scene.count_min", "minimum heads per scene"),
    ("scene.count_max", "maximum heads per scene"),
    ("scene.layout", "uniform, gradient or clustered"),
    ("scene.head_radius", "head disc radius in pixels"),
    ("scene.texture_seed", "fixed background seed (none: per scene)"),
    ("scene.clutter", "maximum head-like distractors per scene"),
    ("detector.base_recall", "recall with no crowd around"),
    ("detector.recall_decay", "recall lost per person of local density"),
    ("detector.base_score", "score with no crowd around"),
    ("detector.score_decay", "score lost per person of local density"),
    ("detector.score_noise", "score noise standard deviation"),
    ("detector.jitter", "centre jitter standard deviation in pixels"),
    ("detector.box_width", "detection box width"),
    ("detector.box_height", "detection box height"),
    ("detector.false_positives", "expected spurious detections per scene"),
    ("detector.seed", "detector seed"),
    ("dataset.train", "training scenes"),
    ("dataset.val", "validation scenes"),
    ("dataset.test", "test scenes"),
    ("dataset.seed", "scene generation seed"),
];

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("{key}: {value:?} is not {what}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value.trim().parse().map_err(|_| bad(key, value, what))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, value, "a boolean")),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let d = &mut self.dataset;
        let real = |v: &str| num::<f64>(key, v, "a number");
        let int = |v: &str| num::<usize>(key, v, "a non-negative integer");
        let long = |v: &str| num::<u64>(key, v, "a non-negative integer");
        match key {
            "data_dir" => self.data_dir = PathBuf::from(value.trim()),
            "out_dir" => self.out_dir = PathBuf::from(value.trim()),
            "checkpoint" => self.checkpoint = opt_path(value),
            "resume" => self.resume = opt_path(value),
            "eval_split" => self.eval_split = value.trim().parse()?,
            "rooted_mse" => self.rooted_mse = flag(key, value)?,
            "train.lambda" => t.lambda = real(value)?,
            "train.lr0" => t.lr0 = real(value)?,
            "train.lr_halving_period" => t.lr_halving_period = long(value)?,
            "train.total_steps" => t.total_steps = long(value)?,
            "train.patch_cols" => t.patch_cols = int(value)?,
            "train.patch_rows" => t.patch_rows = int(value)?,
            "train.flip_prob" => t.flip_prob = real(value)?,
            "train.noise_prob" => t.noise_prob = real(value)?,
            "train.noise_min" => t.noise_range.0 = real(value)?,
            "train.noise_max" => t.noise_range.1 = real(value)?,
            "train.seed" => t.seed = long(value)?,
            "train.eval_interval" => t.eval_interval = long(value)?,
            "train.attention_stride" => t.attention_stride = int(value)?,
            "train.qua_grad_to_reg" => t.qua_grad_to_reg = flag(key, value)?,
            "train.train_plain" => t.train_plain = flag(key, value)?,
            "train.score_default" => t.score_default = real(value)?,
            "qualitynet.widths" => {
                t.qualitynet.widths = value.split(',').map(int).collect::<Result<Vec<_>>>()?;
            }
            "qualitynet.kernel" => t.qualitynet.kernel = int(value)?,
            "qualitynet.density_scale" => t.qualitynet.density_scale = real(value)?,
            "kernel.sigma" => t.kernel.sigma = real(value)?,
            "kernel.window" => t.kernel.window = int(value)?,
            "kernel.normalized" => t.kernel.normalized = flag(key, value)?,
            "scene.height" => d.scene.height = int(value)?,
            "scene.width" => d.scene.width = int(value)?,
            "scene.count_min" => d.scene.count_min = int(value)?,
            "scene.count_max" => d.scene.count_max = int(value)?,
            "scene.layout" => d.scene.layout = value.trim().parse::<Layout>()?,
            "scene.head_radius" => d.scene.head_radius = real(value)?,
            "scene.texture_seed" => {
                d.scene.texture_seed = match value.trim() {
                    "none" | "" => None,
                    v => Some(long(v)?),
                }
            }
            "scene.clutter" => d.scene.clutter = int(value)?,
            "detector.base_recall" => d.detector.base_recall = real(value)?,
            "detector.recall_decay" => d.detector.recall_decay = real(value)?,
            "detector.base_score" => d.detector.base_score = real(value)?,
            "detector.score_decay" => d.detector.score_decay = real(value)?,
            "detector.score_noise" => d.detector.score_noise = real(value)?,
            "detector.jitter" => d.detector.position_jitter_sigma = real(value)?,
            "detector.box_width" => d.detector.box_size.0 = real(value)?,
            "detector.box_height" => d.detector.box_size.1 = real(value)?,
            "detector.false_positives" => d.detector.false_positive_rate = real(value)?,
            "detector.seed" => d.detector.seed = long(value)?,
            "dataset.train" => d.train = int(value)?,
            "dataset.val" => d.val = int(value)?,
            "dataset.test" => d.test = int(value)?,
            "dataset.seed" => d.seed = long(value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        d.kernel = t.kernel;
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let d = &self.dataset;
        Some(match key {
            "data_dir" => self.data_dir.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "checkpoint" => show_path(&self.checkpoint),
            "resume" => show_path(&self.resume),
            "eval_split" => self.eval_split.name().to_string(),
            "rooted_mse" => self.rooted_mse.to_string(),
            "train.lambda" => t.lambda.to_string(),
            "train.lr0" => t.lr0.to_string(),
            "train.lr_halving_period" => t.lr_halving_period.to_string(),
            "train.total_steps" => t.total_steps.to_string(),
            "train.patch_cols" => t.patch_cols.to_string(),
            "train.patch_rows" => t.patch_rows.to_string(),
            "train.flip_prob" => t.flip_prob.to_string(),
            "train.noise_prob" => t.noise_prob.to_string(),
            "train.noise_min" => t.noise_range.0.to_string(),
            "train.noise_max" => t.noise_range.1.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.eval_interval" => t.eval_interval.to_string(),
            "train.attention_stride" => t.attention_stride.to_string(),
            "train.qua_grad_to_reg" => t.qua_grad_to_reg.to_string(),
            "train.train_plain" => t.train_plain.to_string(),
            "train.score_default" => t.score_default.to_string(),
            "qualitynet.widths" => t.qualitynet.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
            "qualitynet.kernel" => t.qualitynet.kernel.to_string(),
            "qualitynet.density_scale" => t.qualitynet.density_scale.to_string(),
            "kernel.sigma" => t.kernel.sigma.to_string(),
            "kernel.window" => t.kernel.window.to_string(),
            "kernel.normalized" => t.kernel.normalized.to_string(),
            "scene.height" => d.scene.height.to_string(),
            "scene.width" => d.scene.width.to_string(),
            "scene.count_min" => d.scene.count_min.to_string(),
            "scene.count_max" => d.scene.count_max.to_string(),
            "scene.layout" => d.scene.layout.to_string(),
            "scene.head_radius" => d.scene.head_radius.to_string(),
            "scene.texture_seed" => d.scene.texture_seed.map_or("none".into(), |s| s.to_string()),
            "scene.clutter" => d.scene.clutter.to_string(),
            "detector.base_recall" => d.detector.base_recall.to_string(),
            "detector.recall_decay" => d.detector.recall_decay.to_string(),
            "detector.base_score" => d.detector.base_score.to_string(),
            "detector.score_decay" => d.detector.score_decay.to_string(),
            "detector.score_noise" => d.detector.score_noise.to_string(),
            "detector.jitter" => d.detector.position_jitter_sigma.to_string(),
            "detector.box_width" => d.detector.box_size.0.to_string(),
            "detector.box_height" => d.detector.box_size.1.to_string(),
            "detector.false_positives" => d.detector.false_positive_rate.to_string(),
            "detector.seed" => d.detector.seed.to_string(),
            "dataset.train" => d.train.to_string(),
            "dataset.val" => d.val.to_string(),
            "dataset.test" => d.test.to_string(),
            "dataset.seed" => d.seed.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{}:{}: expected key = value", origin.display(), i + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("{}:{}: {e}", origin.display(), i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut c = RunConfig::default();
        c.apply_text(&text, path)?;
        Ok(c)
    }

    /// Every key with its current value, parseable by [`RunConfig::apply_text`].
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (key, _) in KEYS {
            out.push_str(&format!("{key} = {}\n", self.get(key).expect("schema key")));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.dataset.scene.validate()?;
        self.dataset.detector.validate()?;
        let (h, w) = (self.dataset.scene.height, self.dataset.scene.width);
        if h % self.train.patch_rows != 0 || w % self.train.patch_cols != 0 {
            return Err(Error::Config(format!(
                "scene {h}x{w} does not split into {} rows and {} columns",
                self.train.patch_rows, self.train.patch_cols
            )));
        }
        if h / self.train.patch_rows < 16 || w / self.train.patch_cols < 16 {
            return Err(Error::Config("patches must be at least 16x16".into()));
        }
        Ok(())
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join(BEST_CHECKPOINT))
    }

    fn grid(&self) -> (usize, usize) {
        (self.train.patch_cols, self.train.patch_rows)
    }

    fn write_effective(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join(EFFECTIVE_CONFIG_FILE), &self.dump())
    }

    fn load_model(&self) -> Result<Model> {
        let path = self.checkpoint_path();
        if !path.exists() {
            return Err(Error::Missing(format!("checkpoint {} does not exist", path.display())));
        }
        let ck = Checkpoint::load(&path)?;
        Model::from_checkpoint(&ck, self.train.qualitynet.density_scale, self.train.attention_stride)
    }

    fn load(&self, split: Split) -> Result<Vec<crate::data_io::Scene>> {
        if !self.data_dir.join(crate::data_io::MANIFEST_FILE).exists() {
            return Err(Error::Missing(format!(
                "no dataset at {} (run synth first)",
                self.data_dir.display()
            )));
        }
        load_split(&self.data_dir, split)
    }
}

/// Generates all splits into `data_dir`.
pub fn cmd_synth(config: &RunConfig) -> Result<Vec<ManifestEntry>> {
    config.validate()?;
    let entries = write_dataset(&config.dataset, &config.data_dir)?;
    config.write_effective(&config.data_dir)?;
    Ok(entries)
}

fn train_into(config: &RunConfig, dir: &Path, mut progress: impl FnMut(&str)) -> Result<TrainOutcome> {
    let train_scenes = config.load(Split::Train)?;
    let val_scenes = config.load(Split::Val)?;
    let state = match &config.resume {
        Some(p) => TrainState::from_checkpoint(&Checkpoint::load(p)?, &config.train)?,
        None => TrainState::init(&config.train)?,
    };
    let out = train_from(state, &config.train, &train_scenes, &val_scenes, |row| progress(&row.csv_line()))?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    out.best.save(&dir.join(BEST_CHECKPOINT))?;
    out.last.save(&dir.join(LAST_CHECKPOINT))?;
    write_file(&dir.join(METRICS_FILE), &metrics_csv(&out.metrics))?;
    Ok(out)
}

/// Trains into `out_dir`: best and last checkpoints plus the metrics log.
pub fn cmd_train(config: &RunConfig, progress: impl FnMut(&str)) -> Result<TrainOutcome> {
    config.validate()?;
    config.write_effective(&config.out_dir)?;
    train_into(config, &config.out_dir, progress)
}

fn report(config: &RunConfig, model: &Model) -> Result<EvalReport> {
    let scenes = config.load(config.eval_split)?;
    let records = evaluate_model(model, &scenes, config.grid(), &config.train.kernel, config.train.score_default)?;
    EvalReport::with_mse_form(records, config.rooted_mse)
}

/// Evaluates the checkpoint on `eval_split` into `out_dir/eval`.
pub fn cmd_eval(config: &RunConfig) -> Result<EvalReport> {
    config.validate()?;
    let model = config.load_model()?;
    let rep = report(config, &model)?;
    let dir = config.out_dir.join("eval");
    config.write_effective(&dir)?;
    rep.write(&dir)?;
    Ok(rep)
}

/// Trains once with both attention heads and evaluates all five variants into `out_dir/ablate`.
pub fn cmd_ablate(config: &RunConfig, progress: impl FnMut(&str)) -> Result<EvalReport> {
    let mut config = config.clone();
    config.train.train_plain = true;
    config.validate()?;
    let dir = config.out_dir.join("ablate");
    config.write_effective(&dir)?;
    let out = train_into(&config, &dir, progress)?;
    let model = Model::from_checkpoint(&out.best, config.train.qualitynet.density_scale, config.train.attention_stride)?;
    let rep = report(&config, &model)?;
    rep.write(&dir)?;
    write_file(&dir.join(ABLATION_FILE), &rep.summary_csv())?;
    Ok(rep)
}

/// Score-per-count bins, scatter and tercile errors into `out_dir/trends`.
pub fn cmd_trends(config: &RunConfig) -> Result<TrendReport> {
    config.validate()?;
    let model = config.load_model()?;
    let scenes = config.load(config.eval_split)?;
    let records = evaluate_model(&model, &scenes, config.grid(), &config.train.kernel, config.train.score_default)?;
    let t = trend_report(&records);
    let dir = config.out_dir.join("trends");
    config.write_effective(&dir)?;
    t.write(&dir)?;
    Ok(t)
}

pub fn command() -> Command {
    let shared: Vec<Arg> = std::iter::once(
        Arg::new("config")
            .long("config")
            .value_name("PATH")
            .help("key = value file applied before the flags"),
    )
    .chain(KEYS.iter().map(|(key, help)| {
        Arg::new(*key)
            .long(*key)
            .value_name("VALUE")
            .help(*help)
            .action(ArgAction::Set)
    }))
    .collect();
    let sub = |name: &'static str, about: &'static str| Command::new(name).about(about).args(shared.clone());
    Command::new("decidenet")
        .about("Attention-fused crowd counting on synthetic scenes")
        .subcommand_required(true)
        .args_override_self(true)
        .subcommand(sub("synth", "generate train/val/test scenes with simulated detections"))
        .subcommand(sub("train", "train RegNet and the attention heads"))
        .subcommand(sub("eval", "per-scene counts and MAE/MSE for every variant"))
        .subcommand(sub("ablate", "train once and report all five variants"))
        .subcommand(sub("trends", "score and error trends against the true count"))
}

pub fn config_from_matches(m: &ArgMatches) -> Result<RunConfig> {
    let mut c = match m.get_one::<String>("config") {
        Some(p) => RunConfig::from_file(Path::new(p))?,
        None => RunConfig::default(),
    };
    for (key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            c.set(key, v)?;
        }
    }
    Ok(c)
}

/// Parses `args` (program name first) and runs the chosen command.
pub fn run<I, T>(args: I) -> Result<String>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = command().try_get_matches_from(args).map_err(|e| Error::Config(e.to_string()))?;
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let config = config_from_matches(sub)?;
    let progress = |line: &str| eprintln!("{line}");
    Ok(match name {
        "synth" => {
            let entries = cmd_synth(&config)?;
            format!("wrote {} scenes to {}\n", entries.len(), config.data_dir.display())
        }
        "train" => {
            let out = cmd_train(&config, progress)?;
            format!(
                "best step {} val mae {} -> {}\n",
                out.best_step,
                out.best_val_mae,
                config.out_dir.join(BEST_CHECKPOINT).display()
            )
        }
        "eval" => cmd_eval(&config)?.summary_csv(),
        "ablate" => cmd_ablate(&config, progress)?.summary_csv(),
        "trends" => cmd_trends(&config)?.bins_csv(),
        _ => unreachable!("unknown subcommand"),
    })
}

/// Runs the command line and maps the outcome to a process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    if let Err(e) = command().try_get_matches_from(args.clone()) {
        use clap::error::ErrorKind;
        let help = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
        let _ = e.print();
        return if help { 0 } else { EXIT_CONFIG };
    }
    match run(args) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips() {
        let mut c = RunConfig::default();
        c.set("train.lambda", "0.25").unwrap();
        c.set("scene.texture_seed", "7").unwrap();
        c.set("checkpoint", "x/y.ckpt").unwrap();
        c.set("qualitynet.widths", "8,8,4,1").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.dump(), Path::new("dump")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn every_key_has_a_getter() {
        let c = RunConfig::default();
        for (k, _) in KEYS {
            let v = c.get(k).unwrap();
            let mut d = RunConfig::default();
            d.set(k, &v).unwrap();
            assert_eq!(d, c, "{k}");
        }
    }

    #[test]
    fn defaults_carry_training_schedule() {
        let dump = RunConfig::default().dump();
        assert!(dump.contains("train.lr0 = 0.005\n"));
        assert!(dump.contains("train.total_steps = 40000\n"));
        assert!(dump.contains("train.lr_halving_period = 10000\n"));
        assert!(dump.contains("kernel.sigma = 4\n"));
        assert!(dump.contains("train.score_default = 0.1\n"));
    }

    #[test]
    fn unknown_and_malformed_keys_are_config_errors() {
        let mut c = RunConfig::default();
        assert!(c.set("train.momentum", "0.9").unwrap_err().is_config_error());
        assert!(c.set("train.lr0", "fast").unwrap_err().is_config_error());
        let e = c.apply_text("# ok\ntrain.lr0 = 0.01\nbogus\n", Path::new("f.cfg")).unwrap_err();
        assert!(e.to_string().contains("f.cfg:3"), "{e}");
        assert_eq!(c.train.lr0, 0.01);
    }

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "train.lambda = 0.5\ntrain.seed = 3\n").unwrap();
        let m = command()
            .try_get_matches_from(["decidenet", "train", "--config", path.to_str().unwrap(), "--train.seed", "9"])
            .unwrap();
        let c = config_from_matches(m.subcommand().unwrap().1).unwrap();
        assert_eq!(c.train.lambda, 0.5);
        assert_eq!(c.train.seed, 9);
    }

    #[test]
    fn exit_codes_separate_config_from_runtime() {
        assert_eq!(main_with_args(["decidenet", "train", "--train.nope", "1"]), EXIT_CONFIG);
        assert_eq!(main_with_args(["decidenet", "train", "--train.flip_prob", "2"]), EXIT_CONFIG);
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("absent");
        assert_eq!(
            main_with_args(["decidenet", "eval", "--data_dir", missing.to_str().unwrap(), "--out_dir", missing.to_str().unwrap()]),
            EXIT_RUNTIME
        );
    }
}
