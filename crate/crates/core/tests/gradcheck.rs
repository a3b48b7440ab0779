//! Analytic gradients against central finite differences.

use mtkd_core::contrastive::{
    clip_loss, clip_loss_soft, image_to_text_probs, text_to_image_probs, ContrastiveBatch,
};
use mtkd_core::distill::{kl_pair_loss, mse_align, TeacherOutputs};
use mtkd_core::encoder::{backward, encode, init_params, Activation, EncoderConfig};
use mtkd_core::numerics::{softmax_rows, DenseMatrix, SeededRng};

const H: f64 = 1e-5;
const INSTANCES: u64 = 20;

fn central(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut buf = x.to_vec();
    (0..x.len())
        .map(|i| {
            buf[i] = x[i] + H;
            let up = f(&buf);
            buf[i] = x[i] - H;
            let down = f(&buf);
            buf[i] = x[i];
            (up - down) / (2.0 * H)
        })
        .collect()
}

/// Relative error with an absolute floor so exactly-zero coordinates count.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

#[derive(Default)]
struct Tally {
    pass: usize,
    total: usize,
    worst: f64,
}

impl Tally {
    fn add(&mut self, analytic: &[f64], numeric: &[f64]) {
        assert_eq!(analytic.len(), numeric.len());
        for (&a, &n) in analytic.iter().zip(numeric) {
            let e = rel_err(a, n);
            self.worst = self.worst.max(e);
            self.total += 1;
            if e <= 1e-5 {
                self.pass += 1;
            }
        }
    }

    fn assert_fidelity(&self, what: &str) {
        let frac = self.pass as f64 / self.total as f64;
        assert!(frac >= 0.99, "{what}: only {frac:.4} of {} coordinates within 1e-5 (worst {:e})", self.total, self.worst);
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> DenseMatrix {
    DenseMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

fn unit_rows(rows: usize, cols: usize, rng: &mut SeededRng) -> DenseMatrix {
    let mut m = random_matrix(rows, cols, rng);
    for r in 0..rows {
        let n = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        m.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    m
}

fn random_distributions(rows: usize, cols: usize, rng: &mut SeededRng) -> DenseMatrix {
    let logits = random_matrix(rows, cols, rng);
    softmax_rows(&logits, 1.0).unwrap().into_matrix()
}

#[test]
fn encoder_backward_matches_finite_differences() {
    let mut tally = Tally::default();
    for inst in 0..INSTANCES {
        let mut rng = SeededRng::new(1000 + inst);
        let act = if inst % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let hidden = if inst % 3 == 0 { vec![] } else { vec![5, 4][..1 + (inst as usize % 2)].to_vec() };
        let dropout = if inst % 4 == 1 { 0.3 } else { 0.0 };
        let cfg = EncoderConfig::new(4, hidden, 3).with_activation(act).with_dropout(dropout);
        let mut params = init_params(&cfg, &mut rng).unwrap();
        // Nonzero biases so the check covers their gradient paths too.
        for l in 0..params.num_layers() {
            params.bias_mut(l).iter_mut().for_each(|b| *b = 0.1 * rng.normal());
        }
        let x = random_matrix(3, 4, &mut rng);
        let g = random_matrix(3, 3, &mut rng);
        let mask_seed = 77 + inst;
        let loss = |p: &mtkd_core::encoder::EncoderParams, x: &DenseMatrix| {
            let (out, _) = encode(p, x, true, &mut SeededRng::new(mask_seed)).unwrap();
            out.data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, mut tape) = encode(&params, &x, true, &mut SeededRng::new(mask_seed)).unwrap();
        let (gp, gx) = backward(&mut tape, &g).unwrap();

        let numeric_p = central(
            |flat| {
                let mut p = params.clone();
                p.as_mut_slice().copy_from_slice(flat);
                loss(&p, &x)
            },
            params.as_slice(),
        );
        tally.add(gp.as_slice(), &numeric_p);
        let numeric_x = central(
            |flat| loss(&params, &DenseMatrix::from_vec(3, 4, flat.to_vec()).unwrap()),
            x.data(),
        );
        tally.add(gx.data(), &numeric_x);
    }
    tally.assert_fidelity("encoder");
}

#[test]
fn clip_loss_matches_finite_differences() {
    let mut tally = Tally::default();
    for inst in 0..INSTANCES {
        let mut rng = SeededRng::new(2000 + inst);
        let (b, d) = (4, 3);
        // Alternate in-batch pairing with a wider class bank.
        let n = if inst % 2 == 0 { b } else { 6 };
        let tau = 0.5 + rng.uniform();
        let u = unit_rows(b, d, &mut rng);
        let w = unit_rows(n, d, &mut rng);
        let labels: Vec<usize> = (0..b).map(|i| if n == b { i } else { rng.index(n) }).collect();
        let value = |u: &DenseMatrix, w: &DenseMatrix| {
            clip_loss(&ContrastiveBatch::from_raw(u, w, tau).unwrap(), &labels).unwrap().value
        };
        let analytic = clip_loss(&ContrastiveBatch::new(&u, &w, tau).unwrap(), &labels).unwrap();
        let nu = central(|f| value(&DenseMatrix::from_vec(b, d, f.to_vec()).unwrap(), &w), u.data());
        let nw = central(|f| value(&u, &DenseMatrix::from_vec(n, d, f.to_vec()).unwrap()), w.data());
        tally.add(analytic.grad_u.data(), &nu);
        tally.add(analytic.grad_w.data(), &nw);
    }
    tally.assert_fidelity("clip_loss");
}

#[test]
fn soft_target_clip_loss_matches_finite_differences() {
    let mut tally = Tally::default();
    for inst in 0..INSTANCES {
        let mut rng = SeededRng::new(2500 + inst);
        let (b, n, d) = (3, 5, 4);
        let u = unit_rows(b, d, &mut rng);
        let w = unit_rows(n, d, &mut rng);
        let targets = random_distributions(b, n, &mut rng);
        let value = |u: &DenseMatrix, w: &DenseMatrix| {
            clip_loss_soft(&ContrastiveBatch::from_raw(u, w, 0.7).unwrap(), &targets).unwrap().value
        };
        let analytic = clip_loss_soft(&ContrastiveBatch::new(&u, &w, 0.7).unwrap(), &targets).unwrap();
        let nu = central(|f| value(&DenseMatrix::from_vec(b, d, f.to_vec()).unwrap(), &w), u.data());
        let nw = central(|f| value(&u, &DenseMatrix::from_vec(n, d, f.to_vec()).unwrap()), w.data());
        tally.add(analytic.grad_u.data(), &nu);
        tally.add(analytic.grad_w.data(), &nw);
    }
    tally.assert_fidelity("clip_loss_soft");
}

#[test]
fn kl_pair_loss_matches_finite_differences() {
    let mut tally = Tally::default();
    for inst in 0..INSTANCES {
        let mut rng = SeededRng::new(3000 + inst);
        let (b, d) = (4, 3);
        let tau_t = 0.5 + rng.uniform();
        let tau_s = 0.5 + rng.uniform();
        let teacher = TeacherOutputs::from_features(unit_rows(b, d, &mut rng), unit_rows(b, d, &mut rng), tau_t).unwrap();
        let u = unit_rows(b, d, &mut rng);
        let w = unit_rows(b, d, &mut rng);
        let (wi, wt) = (rng.uniform(), rng.uniform());
        let parts = |u: &DenseMatrix, w: &DenseMatrix| {
            let batch = ContrastiveBatch::from_raw(u, w, tau_s).unwrap();
            let i2t = image_to_text_probs(&batch).unwrap();
            let t2i = text_to_image_probs(&batch).unwrap();
            kl_pair_loss(&teacher, &i2t, &t2i, tau_s).unwrap()
        };
        let value = |u: &DenseMatrix, w: &DenseMatrix| {
            let kl = parts(u, w);
            wi * kl.i2t + wt * kl.t2i
        };
        let (gu, gw) = parts(&u, &w).feature_grads(&u, &w, wi, wt).unwrap();
        let nu = central(|f| value(&DenseMatrix::from_vec(b, d, f.to_vec()).unwrap(), &w), u.data());
        let nw = central(|f| value(&u, &DenseMatrix::from_vec(b, d, f.to_vec()).unwrap()), w.data());
        tally.add(gu.data(), &nu);
        tally.add(gw.data(), &nw);
    }
    tally.assert_fidelity("kl_pair_loss");
}

#[test]
fn mse_align_matches_finite_differences() {
    let mut tally = Tally::default();
    for inst in 0..INSTANCES {
        let mut rng = SeededRng::new(4000 + inst);
        let (b, d) = (3, 4);
        let (ut, wt) = (unit_rows(b, d, &mut rng), unit_rows(b, d, &mut rng));
        let (us, ws) = (random_matrix(b, d, &mut rng), random_matrix(b, d, &mut rng));
        let analytic = mse_align(&ut, &us, &wt, &ws).unwrap();
        let nu = central(|f| mse_align(&ut, &DenseMatrix::from_vec(b, d, f.to_vec()).unwrap(), &wt, &ws).unwrap().value, us.data());
        let nw = central(|f| mse_align(&ut, &us, &wt, &DenseMatrix::from_vec(b, d, f.to_vec()).unwrap()).unwrap().value, ws.data());
        tally.add(analytic.grad_u.data(), &nu);
        tally.add(analytic.grad_w.data(), &nw);
    }
    tally.assert_fidelity("mse_align");
}
