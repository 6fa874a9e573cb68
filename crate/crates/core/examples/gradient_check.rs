//! Compare tape gradients of both losses with central finite differences.

use decidenet::networks::{QualityNetConfig, QualityNetParams, RegNetParams};
use decidenet::numerics::{Tape, Tensor};
use decidenet::training::{loss_qua, loss_reg};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen::<f64>())
}

fn reg_loss(net: &RegNetParams, x: &Tensor, gt: &Tensor, grads: Option<&mut RegNetParams>) -> f64 {
    let mut tape = Tape::new();
    let b = net.bind(&mut tape);
    let xv = tape.leaf(x);
    let g = tape.leaf(gt);
    let y = net.forward(&mut tape, &b, xv).unwrap();
    let l = loss_reg(&mut tape, y, g).unwrap();
    if let Some(out) = grads {
        tape.backward(l).unwrap();
        out.store_grads(&tape, &b).unwrap();
    }
    tape.value(l)[0]
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = RegNetParams::init(3, &mut rng);
    net.conv5.bias.values_mut().fill(0.1);
    net.conv5.weight.values_mut().iter_mut().for_each(|w| *w = w.abs());
    let x = random(&[2, 3, 16, 16], &mut rng);
    let gt = Tensor::from_fn(&[2, 1, 4, 4], |_| rng.gen::<f64>() * 0.1);
    let mut with_grads = net.clone();
    reg_loss(&net, &x, &gt, Some(&mut with_grads));
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let layer = rng.gen_range(0..10);
        let n = net.params_mut()[layer].len();
        let i = rng.gen_range(0..n);
        let analytic = with_grads.params_mut()[layer].grad().unwrap()[i];
        let orig = net.params_mut()[layer].values()[i];
        net.params_mut()[layer].values_mut()[i] = orig + H;
        let up = reg_loss(&net, &x, &gt, None);
        net.params_mut()[layer].values_mut()[i] = orig - H;
        let down = reg_loss(&net, &x, &gt, None);
        net.params_mut()[layer].values_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * H);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    println!("RegNet / loss_reg: worst relative error over 20 parameters {worst:.2e}");

    let mut head = QualityNetParams::init(&QualityNetConfig::default(), &mut rng).unwrap();
    let img = random(&[1, 3, 8, 8], &mut rng);
    let det = Tensor::from_fn(&[1, 1, 8, 8], |_| rng.gen::<f64>() * 0.05);
    let reg = Tensor::from_fn(&[1, 1, 8, 8], |_| rng.gen::<f64>() * 0.05);
    let s = random(&[1, 1, 8, 8], &mut rng);
    let qua = |head: &QualityNetParams, grads: Option<&mut QualityNetParams>| {
        let mut tape = Tape::new();
        let b = head.bind(&mut tape);
        let (iv, dv, rv, gv, sv) = (tape.leaf(&img), tape.leaf(&det), tape.leaf(&reg), tape.leaf(&gt_q(&det)), tape.leaf(&s));
        let f = decidenet::networks::fuse_on_tape(&mut tape, head, &b, iv, dv, rv).unwrap();
        let l = loss_qua(&mut tape, f.blended, gv, f.attention, sv, 1.0).unwrap();
        if let Some(out) = grads {
            tape.backward(l).unwrap();
            out.store_grads(&tape, &b).unwrap();
        }
        tape.value(l)[0]
    };
    let mut with_grads = head.clone();
    qua(&head, Some(&mut with_grads));
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let layer = rng.gen_range(0..8);
        let i = rng.gen_range(0..head.params_mut()[layer].len());
        let analytic = with_grads.params_mut()[layer].grad().unwrap()[i];
        let orig = head.params_mut()[layer].values()[i];
        head.params_mut()[layer].values_mut()[i] = orig + H;
        let up = qua(&head, None);
        head.params_mut()[layer].values_mut()[i] = orig - H;
        let down = qua(&head, None);
        head.params_mut()[layer].values_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * H);
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8));
    }
    println!("QualityNet / loss_qua: worst relative error over 20 parameters {worst:.2e}");
}

fn gt_q(det: &Tensor) -> Tensor {
    Tensor::from_fn(det.shape(), |i| det.values()[i] * 1.3)
}
