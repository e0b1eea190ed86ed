//! Shared test oracles: an independent f64 implementation of every op and
//! central-difference gradient checks against the tape.
#![allow(dead_code)]

use adda::losses;
use adda::models::{ClassifierHead, Discriminator, Encoder, LeNetSpec, Module, Role};
use adda::tensor::{Param, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const OP_TOL: f64 = 1e-3;
pub const COMPOSED_TOL: f64 = 1e-2;

pub mod reference {
    /// `a[m×k] · b[k×n]`
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    pub fn add_bias(x: &[f64], b: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(i, v)| v + b[i % b.len()]).collect()
    }

    /// Direct cross-correlation; `x` is `n×c×h×w`, `k` is `f×c×kh×kw`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        x: &[f64],
        k: &[f64],
        bias: &[f64],
        (n, c, h, w): (usize, usize, usize, usize),
        (f, kh, kw): (usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> (Vec<f64>, usize, usize) {
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * f * oh * ow];
        for img in 0..n {
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[fi];
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let y = (oy * stride + ki) as isize - pad as isize;
                                    let xx = (ox * stride + kj) as isize - pad as isize;
                                    if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                        continue;
                                    }
                                    acc += x[((img * c + ci) * h + y as usize) * w + xx as usize]
                                        * k[((fi * c + ci) * kh + ki) * kw + kj];
                                }
                            }
                        }
                        out[((img * f + fi) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        (out, oh, ow)
    }

    /// 2×2 stride-2 max pool over `planes` planes of `h×w`.
    pub fn maxpool2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for oy in 0..oh {
                for ox in 0..ow {
                    let at = |dy: usize, dx: usize| x[(p * h + 2 * oy + dy) * w + 2 * ox + dx];
                    out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
                }
            }
        }
        out
    }

    pub fn relu(x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v.max(0.0)).collect()
    }

    pub fn sigmoid(x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect()
    }

    pub fn log_sigmoid_scalar(v: f64) -> f64 {
        v.min(0.0) - (-v.abs()).exp().ln_1p()
    }

    pub fn log_sigmoid(x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| log_sigmoid_scalar(v)).collect()
    }

    pub fn log_softmax(x: &[f64], cols: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        out
    }

    pub fn mean(x: &[f64]) -> f64 {
        x.iter().sum::<f64>() / x.len() as f64
    }

    pub fn cross_entropy(logits: &[f64], labels: &[usize], cols: usize) -> f64 {
        let lp = log_softmax(logits, cols);
        -labels.iter().enumerate().map(|(i, &y)| lp[i * cols + y]).sum::<f64>() / labels.len() as f64
    }

    pub fn disc_loss(ls: &[f64], lt: &[f64]) -> f64 {
        -mean(&log_sigmoid(ls)) - mean(&log_sigmoid(&neg(lt)))
    }

    pub fn gan_loss(lt: &[f64]) -> f64 {
        -mean(&log_sigmoid(lt))
    }

    pub fn confusion_loss(per_domain: &[&[f64]]) -> f64 {
        -per_domain
            .iter()
            .map(|l| 0.5 * mean(&log_sigmoid(l)) + 0.5 * mean(&log_sigmoid(&neg(l))))
            .sum::<f64>()
    }

    pub fn neg(x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| -v).collect()
    }

    /// Dense layer with `w` stored `[in×out]`.
    pub fn linear(x: &[f64], w: &[f64], b: &[f64], rows: usize, inp: usize, out: usize) -> Vec<f64> {
        add_bias(&matmul(x, w, rows, inp, out), b)
    }
}

/// Outcome of one gradient comparison.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub rel_err: f64,
    pub tol: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.rel_err.is_finite() && self.rel_err <= self.tol
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-12)`
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

pub fn to64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f32 = rng.gen_range(0.1..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values so every pooling window has a strict maximum.
pub fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| i as f32 * 0.05 - n as f32 * 0.025).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

type TapeFn = dyn Fn(&mut Tape, &[Var]) -> Var;
type RefFn = dyn Fn(&[Vec<f64>]) -> Vec<f64>;

/// Compares the tape's gradient of `Σ w ⊙ op(inputs)` with central
/// differences of the f64 reference, over every input coordinate.
pub fn check_op(name: &str, inputs: &[Tensor], op: &TapeFn, reference: &RefFn, rng: &mut ChaCha8Rng) -> Check {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let y = op(&mut tape, &vars);
    let w = random(tape.shape(y), rng, -1.0, 1.0);
    let w64 = to64(&w);
    let wv = tape.constant(w);
    let prod = tape.mul(y, wv).unwrap();
    let loss = tape.sum(prod);

    let ins64: Vec<Vec<f64>> = inputs.iter().map(to64).collect();
    let forward_ok = rel_err(&to64(tape.value(y)), &reference(&ins64)) <= 1e-5;
    tape.backward(loss).unwrap();

    let objective = |x: &[Vec<f64>]| -> f64 { reference(x).iter().zip(&w64).map(|(a, b)| a * b).sum() };
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (i, v) in vars.iter().enumerate() {
        let g = tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        analytic.extend(g.iter().map(|&x| x as f64));
        let mut x = ins64.clone();
        for j in 0..x[i].len() {
            let orig = x[i][j];
            x[i][j] = orig + FD_STEP;
            let up = objective(&x);
            x[i][j] = orig - FD_STEP;
            let down = objective(&x);
            x[i][j] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    Check {
        name: name.to_string(),
        rel_err: if forward_ok { rel_err(&analytic, &numeric) } else { f64::INFINITY },
        tol: OP_TOL,
    }
}

/// Every primitive op, each on fresh random inputs.
pub fn op_checks(seed: u64) -> Vec<Check> {
    use reference as r;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let rng = &mut rng;

    let a = random(&[3, 4], rng, -1.0, 1.0);
    let b = random(&[4, 5], rng, -1.0, 1.0);
    out.push(check_op(
        "matmul",
        &[a, b],
        &|t, v| t.matmul(v[0], v[1]).unwrap(),
        &|x| r::matmul(&x[0], &x[1], 3, 4, 5),
        rng,
    ));

    let x = random(&[3, 4], rng, -1.0, 1.0);
    let bias = random(&[4], rng, -1.0, 1.0);
    out.push(check_op(
        "add_bias",
        &[x, bias],
        &|t, v| t.add_bias(v[0], v[1]).unwrap(),
        &|x| r::add_bias(&x[0], &x[1]),
        rng,
    ));

    for (stride, pad) in [(1, 0), (2, 1)] {
        let x = random(&[2, 2, 6, 5], rng, -1.0, 1.0);
        let k = random(&[3, 2, 3, 3], rng, -1.0, 1.0);
        let bias = random(&[3], rng, -0.5, 0.5);
        out.push(check_op(
            &format!("conv2d(stride={stride},padding={pad})"),
            &[x, k, bias],
            &move |t, v| t.conv2d(v[0], v[1], v[2], stride, pad).unwrap(),
            &move |x| r::conv2d(&x[0], &x[1], &x[2], (2, 2, 6, 5), (3, 3, 3), stride, pad).0,
            rng,
        ));
    }

    let x = distinct(&[2, 3, 4, 6], rng);
    out.push(check_op(
        "maxpool2",
        &[x],
        &|t, v| t.maxpool2(v[0]).unwrap(),
        &|x| r::maxpool2(&x[0], 6, 4, 6),
        rng,
    ));

    let x = away_from_zero(&[4, 5], rng);
    out.push(check_op("relu", &[x], &|t, v| t.relu(v[0]), &|x| r::relu(&x[0]), rng));

    let x = random(&[4, 5], rng, -4.0, 4.0);
    out.push(check_op("sigmoid", &[x.clone()], &|t, v| t.sigmoid(v[0]), &|x| r::sigmoid(&x[0]), rng));
    out.push(check_op(
        "log_sigmoid",
        &[x.clone()],
        &|t, v| t.log_sigmoid(v[0]),
        &|x| r::log_sigmoid(&x[0]),
        rng,
    ));
    out.push(check_op(
        "log_softmax",
        &[x.clone()],
        &|t, v| t.log_softmax(v[0]).unwrap(),
        &|x| r::log_softmax(&x[0], 5),
        rng,
    ));
    out.push(check_op("neg", &[x.clone()], &|t, v| t.neg(v[0]), &|x| r::neg(&x[0]), rng));
    out.push(check_op(
        "scale",
        &[x.clone()],
        &|t, v| t.scale(v[0], -0.7),
        &|x| x[0].iter().map(|v| v * -0.7f32 as f64).collect(),
        rng,
    ));
    out.push(check_op(
        "reshape",
        &[x.clone()],
        &|t, v| t.reshape(v[0], &[2, 10]).unwrap(),
        &|x| x[0].clone(),
        rng,
    ));
    out.push(check_op(
        "sum",
        &[x.clone()],
        &|t, v| t.sum(v[0]),
        &|x| vec![x[0].iter().sum()],
        rng,
    ));
    out.push(check_op(
        "mean",
        &[x.clone()],
        &|t, v| t.mean(v[0]),
        &|x| vec![r::mean(&x[0])],
        rng,
    ));
    let idx = [4usize, 0, 2, 2];
    out.push(check_op(
        "gather",
        &[x.clone()],
        &move |t, v| t.gather(v[0], &idx).unwrap(),
        &move |x| idx.iter().enumerate().map(|(i, &j)| x[0][i * 5 + j]).collect(),
        rng,
    ));

    let y = random(&[4, 5], rng, -2.0, 2.0);
    out.push(check_op(
        "add",
        &[x.clone(), y.clone()],
        &|t, v| t.add(v[0], v[1]).unwrap(),
        &|x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect(),
        rng,
    ));
    out.push(check_op(
        "sub",
        &[x.clone(), y.clone()],
        &|t, v| t.sub(v[0], v[1]).unwrap(),
        &|x| x[0].iter().zip(&x[1]).map(|(a, b)| a - b).collect(),
        rng,
    ));
    out.push(check_op(
        "mul",
        &[x.clone(), y.clone()],
        &|t, v| t.mul(v[0], v[1]).unwrap(),
        &|x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect(),
        rng,
    ));
    let z = random(&[2, 5], rng, -2.0, 2.0);
    out.push(check_op(
        "concat_rows",
        &[x, z],
        &|t, v| t.concat_rows(&[v[0], v[1]]).unwrap(),
        &|x| x[0].iter().chain(&x[1]).copied().collect(),
        rng,
    ));

    // the losses, treated as ops of their logits
    let logits = random(&[5, 3], rng, -3.0, 3.0);
    let labels = [0usize, 2, 1, 1, 0];
    out.push(check_op(
        "classification_loss",
        &[logits],
        &move |t, v| losses::classification_loss(t, v[0], &labels).unwrap().var,
        &move |x| vec![r::cross_entropy(&x[0], &labels, 3)],
        rng,
    ));
    let ls = random(&[4, 1], rng, -3.0, 3.0);
    let lt = random(&[3, 1], rng, -3.0, 3.0);
    out.push(check_op(
        "discriminator_loss",
        &[ls.clone(), lt.clone()],
        &|t, v| losses::discriminator_loss_from_logits(t, v[0], v[1]).unwrap().var,
        &|x| vec![r::disc_loss(&x[0], &x[1])],
        rng,
    ));
    out.push(check_op(
        "minimax_mapping_loss",
        &[ls.clone(), lt.clone()],
        &|t, v| losses::mapping_loss_minimax_from_logits(t, v[0], v[1]).unwrap().var,
        &|x| vec![-r::disc_loss(&x[0], &x[1])],
        rng,
    ));
    out.push(check_op(
        "gan_mapping_loss",
        &[lt.clone()],
        &|t, v| losses::mapping_loss_gan_from_logits(t, v[0]).unwrap().var,
        &|x| vec![r::gan_loss(&x[0])],
        rng,
    ));
    out.push(check_op(
        "confusion_mapping_loss",
        &[ls, lt],
        &|t, v| losses::mapping_loss_confusion_from_logits(t, &[v[0], v[1]]).unwrap().var,
        &|x| vec![r::confusion_loss(&[&x[0], &x[1]])],
        rng,
    ));
    out
}

/// Width-reduced LeNet used by composed checks.
pub const SMALL_LENET: LeNetSpec = LeNetSpec {
    conv1: 3,
    conv2: 4,
    hidden: 8,
};

fn layer64(m: &impl Module, i: usize) -> (Vec<f64>, Vec<f64>) {
    let l = &m.layers()[i];
    (to64(&l.weight.value()), to64(&l.bias.value()))
}

/// f64 LeNet forward: conv5 → pool → conv5 → pool → fc → relu.
pub fn reference_encoder(enc: &Encoder, images: &[f64], n: usize) -> Vec<f64> {
    use reference as r;
    let s = enc.spec();
    let (w1, b1) = layer64(enc, 0);
    let (w2, b2) = layer64(enc, 1);
    let (w3, b3) = layer64(enc, 2);
    let (h, _, _) = r::conv2d(images, &w1, &b1, (n, 1, 28, 28), (s.conv1, 5, 5), 1, 0);
    let h = r::maxpool2(&h, n * s.conv1, 24, 24);
    let (h, _, _) = r::conv2d(&h, &w2, &b2, (n, s.conv1, 12, 12), (s.conv2, 5, 5), 1, 0);
    let h = r::maxpool2(&h, n * s.conv2, 8, 8);
    r::relu(&r::linear(&h, &w3, &b3, n, s.conv2 * 16, s.hidden))
}

pub fn reference_discriminator(d: &Discriminator, feats: &[f64], n: usize) -> Vec<f64> {
    use reference as r;
    let (w1, b1) = layer64(d, 0);
    let (w2, b2) = layer64(d, 1);
    let (w3, b3) = layer64(d, 2);
    let (inp, hid) = (w1.len() / b1.len(), b1.len());
    let h = r::relu(&r::linear(feats, &w1, &b1, n, inp, hid));
    let h = r::relu(&r::linear(&h, &w2, &b2, n, hid, hid));
    r::linear(&h, &w3, &b3, n, hid, 1)
}

/// Central differences of `objective` over up to `per_tensor` randomly chosen
/// coordinates of every parameter, against the gradients stored in them.
pub fn check_params(
    name: &str,
    params: &[Param],
    objective: &dyn Fn() -> f64,
    per_tensor: usize,
    rng: &mut ChaCha8Rng,
) -> Check {
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for p in params {
        let grad = p.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.len()]);
        let n = p.len();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        for j in picks {
            let orig = p.value().data()[j];
            // perturb in f64 around the f32 value; the reference reads f32 storage,
            // so use an f32-representable step
            let h = FD_STEP as f32;
            p.value_mut().data_mut()[j] = orig + h;
            let up = objective();
            p.value_mut().data_mut()[j] = orig - h;
            let down = objective();
            p.value_mut().data_mut()[j] = orig;
            let actual_h = ((orig + h) as f64 - (orig - h) as f64) / 2.0;
            numeric.push((up - down) / (2.0 * actual_h));
            analytic.push(grad[j] as f64);
        }
    }
    Check {
        name: name.to_string(),
        rel_err: rel_err(&analytic, &numeric),
        tol: COMPOSED_TOL,
    }
}

/// Synthetic images with smooth blobs so pooling rarely ties.
pub fn blob_images(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = vec![0.0f32; n * 784];
    for img in data.chunks_mut(784) {
        let (cx, cy) = (rng.gen_range(6.0..22.0f32), rng.gen_range(6.0..22.0f32));
        for y in 0..28 {
            for x in 0..28 {
                let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                img[y * 28 + x] = (-d2 / 18.0).exp() + rng.gen_range(0.0..0.05);
            }
        }
    }
    Tensor::new(vec![n, 1, 28, 28], data).unwrap()
}

/// Full encoder + classifier + cross-entropy, and encoder + discriminator +
/// each adversarial loss, against f64 reference forwards.
pub fn composed_checks(seed: u64) -> Vec<Check> {
    use reference as r;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 4;
    let images = blob_images(n, &mut rng);
    let img64 = to64(&images);
    let labels = [0usize, 1, 2, 1];
    let enc = Encoder::lenet(SMALL_LENET, Role::Source, seed);
    let head = ClassifierHead::new(SMALL_LENET.hidden, 3, seed).unwrap();
    let mut out = Vec::new();

    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let f = enc.forward(&mut tape, x, true).unwrap();
    let logits = head.forward(&mut tape, f, true).unwrap();
    let loss = losses::classification_loss(&mut tape, logits, &labels).unwrap();
    tape.backward(loss.var).unwrap();
    let params: Vec<Param> = enc.params().into_iter().chain(head.params()).collect();
    let objective = || {
        let feats = reference_encoder(&enc, &img64, n);
        let (w, b) = layer64(&head, 0);
        r::cross_entropy(&r::linear(&feats, &w, &b, n, SMALL_LENET.hidden, 3), &labels, 3)
    };
    out.push(check_params("lenet+classifier+cross_entropy", &params, &objective, 40, &mut rng));

    let target_images = blob_images(n, &mut rng);
    let t64 = to64(&target_images);
    for kind in ["discriminator", "minimax", "gan", "confusion"] {
        enc.zero_grad();
        let tgt = Encoder::lenet(SMALL_LENET, Role::Target, seed + 1);
        let disc = Discriminator::new(SMALL_LENET.hidden, 6, seed);
        disc.zero_grad();
        let mut tape = Tape::new();
        let xs = tape.constant(images.clone());
        let xt = tape.constant(target_images.clone());
        let fs = enc.forward(&mut tape, xs, true).unwrap();
        let ft = tgt.forward(&mut tape, xt, true).unwrap();
        let train_d = kind == "discriminator";
        let ls = disc.forward(&mut tape, fs, train_d).unwrap();
        let lt = disc.forward(&mut tape, ft, train_d).unwrap();
        let loss = match kind {
            "discriminator" => losses::discriminator_loss_from_logits(&mut tape, ls, lt),
            "minimax" => losses::mapping_loss_minimax_from_logits(&mut tape, ls, lt),
            "gan" => losses::mapping_loss_gan_from_logits(&mut tape, lt),
            _ => losses::mapping_loss_confusion_from_logits(&mut tape, &[ls, lt]),
        }
        .unwrap();
        tape.backward(loss.var).unwrap();
        let objective = || {
            let zs = reference_discriminator(&disc, &reference_encoder(&enc, &img64, n), n);
            let zt = reference_discriminator(&disc, &reference_encoder(&tgt, &t64, n), n);
            match kind {
                "discriminator" => r::disc_loss(&zs, &zt),
                "minimax" => -r::disc_loss(&zs, &zt),
                "gan" => r::gan_loss(&zt),
                _ => r::confusion_loss(&[&zs, &zt]),
            }
        };
        let params: Vec<Param> = if train_d {
            disc.params()
        } else {
            enc.params().into_iter().chain(tgt.params()).collect()
        };
        out.push(check_params(
            &format!("lenet+discriminator+{kind}_loss"),
            &params,
            &objective,
            25,
            &mut rng,
        ));
    }
    out
}
