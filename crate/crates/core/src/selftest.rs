//! The property suite behind `mrssm selftest` (acceptance criteria 1–7).

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::distributions::DiagGaussian;
use crate::diffmath::{Tensor, Var};
use crate::error::Result;
use crate::eval::{integrate_pose, Pose};
use crate::experiment::Criterion;
use crate::model::{param_grad_check, Fusion, ModelConfig, Mrssm, ObservationSet, Propagation, Session, Subset};
use crate::simulator::{generate_dataset, Dataset, SimConfig};
use crate::training::{
    elbo_mvae, elbo_new, fit_normalization, train_run, Batch, BatchVars, ElboVariant, TrainingConfig, Window,
};

type Check = Result<(bool, String)>;

fn verdict(id: u32, name: &'static str, check: Check) -> Criterion {
    match check {
        Ok((passed, detail)) => Criterion { id, name, passed, detail },
        Err(e) => Criterion { id, name, passed: false, detail: format!("error: {e}") },
    }
}

/// Mean and stddev of the normalized product of 1-D Gaussian densities by
/// composite Simpson integration on a wide grid.
pub fn grid_product_moments(means: &[f64], stddevs: &[f64], points: usize) -> (f64, f64) {
    let spread = stddevs.iter().cloned().fold(0.0, f64::max) * 10.0;
    let lo = means.iter().cloned().fold(f64::INFINITY, f64::min) - spread;
    let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + spread;
    let n = points + points % 2;
    let h = (hi - lo) / n as f64;
    let logf = |x: f64| -> f64 { means.iter().zip(stddevs).map(|(m, s)| -0.5 * ((x - m) / s).powi(2)).sum() };
    let peak = (0..=n).map(|i| logf(lo + i as f64 * h)).fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for i in 0..=n {
        let x = lo + i as f64 * h;
        let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        let f = w * (logf(x) - peak).exp();
        z += f;
        m1 += f * x;
        m2 += f * x * x;
    }
    let mean = m1 / z;
    (mean, (m2 / z - mean * mean).sqrt())
}

/// Criterion 1: PoE closed form against grid integration.
pub fn poe_vs_integration(trials: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let k = rng.gen_range(2..=4);
        let means: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let stddevs: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..3.0)).collect();
        let experts = means
            .iter()
            .zip(&stddevs)
            .map(|(&m, &s)| DiagGaussian::<f64>::from_vecs(&[m], &[s]))
            .collect::<Result<Vec<_>>>()?;
        let fused = DiagGaussian::poe_fuse(&experts)?;
        let (gm, gs) = grid_product_moments(&means, &stddevs, 400_000);
        worst = worst.max((fused.mean().item() - gm).abs()).max((fused.stddev().item() - gs).abs());
    }
    Ok((worst < 1e-6, format!("{trials} products, worst deviation {worst:.2e} (limit 1e-6)")))
}

/// Criterion 2: closed-form KL against a Monte Carlo estimate.
pub fn kl_vs_monte_carlo(pairs: usize, samples: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut worst_z: f64 = 0.0;
    for _ in 0..pairs {
        let d = rng.gen_range(1..=4);
        let draw = |rng: &mut ChaCha8Rng| -> (Vec<f64>, Vec<f64>) {
            ((0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(), (0..d).map(|_| rng.gen_range(0.3..2.0)).collect())
        };
        let ((qm, qs), (pm, ps)) = (draw(&mut rng), draw(&mut rng));
        let exact = DiagGaussian::<f64>::from_vecs(&qm, &qs)?.kl(&DiagGaussian::from_vecs(&pm, &ps)?)?;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..samples {
            let mut log_ratio = 0.0;
            for i in 0..d {
                let e: f64 = StandardNormal.sample(&mut rng);
                let x = qm[i] + qs[i] * e;
                let zp = (x - pm[i]) / ps[i];
                log_ratio += -0.5 * e * e - qs[i].ln() + 0.5 * zp * zp + ps[i].ln();
            }
            sum += log_ratio;
            sq += log_ratio * log_ratio;
        }
        let n = samples as f64;
        let mc = sum / n;
        let se = ((sq / n - mc * mc) / n).sqrt();
        let diff = (mc - exact).abs();
        if diff > (0.01 * exact.abs()).max(3.0 * se) {
            failures += 1;
        }
        worst_z = worst_z.max(diff / se.max(f64::MIN_POSITIVE));
    }
    Ok((failures == 0, format!("{pairs} pairs × {samples} samples, {failures} outside 1%/3 SE, max |Δ|/SE {worst_z:.2}")))
}

fn miniature_dataset() -> Result<Dataset> {
    let sim = SimConfig { world_size_m: 30.0, region_spacing_m: 2.0, ..SimConfig::default() };
    generate_dataset(&sim, 4, 16, 3)
}

fn miniature_config(dataset: &Dataset, keep: &[usize], fusion: Fusion) -> Result<ModelConfig> {
    let mut modalities: Vec<_> = keep.iter().map(|&i| dataset.specs()[i].clone()).collect();
    fit_normalization(dataset, &mut modalities)?;
    Ok(ModelConfig {
        modalities,
        deter_dim: 8,
        stoch_dim: 4,
        embed_dim: 8,
        hidden_dim: 8,
        conv_channels: [2, 3, 2],
        fusion,
        ..ModelConfig::default()
    })
}

/// Criterion 3: every parameter tensor of a miniature model (one dense and
/// one image modality, T = 3) against central differences, for the PoE
/// model under both objectives and for the concat baseline.
pub fn gradient_checks(seed: u64) -> Check {
    let ds = miniature_dataset()?;
    let windows = [Window { traj: 0, start: 2 }, Window { traj: 2, start: 5 }];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0f64, String::new());
    let mut tensors = 0;
    for fusion in [Fusion::Poe, Fusion::Concat] {
        let model: Mrssm<f64> = Mrssm::new(miniature_config(&ds, &[0, 3], fusion)?, &mut rng)?;
        let batch: Batch<f64> = Batch::from_windows(&ds, model.config(), &windows, 3, &mut rng)?;
        let full = Subset::full(2);
        let loss = |sess: &mut Session<'_, f64>| -> Result<Var> {
            let mut bv = BatchVars::record(sess, &batch)?;
            let (mvae, cache) = elbo_mvae(sess, &mut bv, full, 1.0)?;
            if fusion == Fusion::Concat {
                return Ok(mvae.loss);
            }
            let new = elbo_new(sess, &mut bv, Subset::singleton(1), Some(&cache), 1.0)?;
            let (single, _) = elbo_mvae(sess, &mut bv, Subset::singleton(0), 1.0)?;
            let l = sess.tape.add(mvae.loss, new.loss)?;
            Ok(sess.tape.add(l, single.loss)?)
        };
        for r in param_grad_check(&model, loss, &[], 3, 1e-5, &mut rng)? {
            tensors += 1;
            if r.worst.error > worst.0 {
                worst = (r.worst.error, r.name);
            }
        }
    }
    Ok((worst.0 < 1e-3, format!("{tensors} parameter tensors, worst relative error {:.2e} in `{}`", worst.0, worst.1)))
}

/// Criterion 4: `elbo_new` on the full set equals `elbo_mvae` under shared noise.
pub fn full_set_equivalence(seed: u64) -> Check {
    let ds = miniature_dataset()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model: Mrssm<f64> = Mrssm::new(miniature_config(&ds, &[0, 1, 2, 3], Fusion::Poe)?, &mut rng)?;
    let windows = [Window { traj: 0, start: 0 }, Window { traj: 1, start: 4 }, Window { traj: 3, start: 7 }];
    let batch: Batch<f64> = Batch::from_windows(&ds, model.config(), &windows, 6, &mut rng)?;
    let mut sess = model.session(false);
    let mut bv = BatchVars::record(&mut sess, &batch)?;
    let full = Subset::full(4);
    let (mvae, cache) = elbo_mvae(&mut sess, &mut bv, full, 1.0)?;
    let new = elbo_new(&mut sess, &mut bv, full, Some(&cache), 1.0)?;
    let (a, b) = (sess.tape.value(mvae.loss).item(), sess.tape.value(new.loss).item());
    Ok(((a - b).abs() < 1e-5, format!("elbo_mvae {a:.9} vs elbo_new {b:.9}, |Δ| = {:.2e}", (a - b).abs())))
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape")
}

/// Criterion 5: posterior stddev never exceeds the prior's, with equality
/// exactly when no expert is fused.
pub fn posterior_contraction(trials: usize, seed: u64) -> Check {
    let ds = miniature_dataset()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model: Mrssm<f64> = Mrssm::new(miniature_config(&ds, &[0, 1, 2, 3], Fusion::Poe)?, &mut rng)?;
    let c = model.config().clone();
    let mut violations = 0;
    for _ in 0..trials {
        let mut state = model.initial_state(&[0.0; 4])?;
        state.h = random_tensor(&mut rng, &[c.deter_dim], 1.0);
        state.s = random_tensor(&mut rng, &[c.stoch_dim], 3.0);
        let subset = Subset::from_bits(rng.gen_range(0..16));
        let values = c
            .modalities
            .iter()
            .enumerate()
            .map(|(i, m)| subset.contains(i).then(|| random_tensor(&mut rng, &m.shape, 2.0)))
            .collect();
        let obs = ObservationSet::new(&c.modalities, values)?;
        let action = crate::model::Action::new(rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0));
        let noise: Vec<f64> = (0..c.stoch_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let next = model.filter_step(&state, action, &obs, &noise)?;
        let (post, prior) = (next.posterior.stddev().data(), next.prior.stddev().data());
        let ok = post.iter().zip(prior).all(|(q, p)| if subset.is_empty() { q == p } else { q < p });
        violations += usize::from(!ok);
    }
    Ok((violations == 0, format!("{trials} random filter steps, {violations} violations")))
}

/// Euler integration of the unicycle with `substeps` equal substeps in total.
pub fn euler_pose(v: &[f64], omega: &[f64], dt: f64, substeps: usize) -> Pose {
    let per = substeps / v.len();
    let h = dt / per as f64;
    let mut p = Pose::default();
    for (&vi, &wi) in v.iter().zip(omega) {
        for _ in 0..per {
            p.x += vi * p.theta.cos() * h;
            p.y += vi * p.theta.sin() * h;
            p.theta += wi * h;
        }
    }
    p
}

/// Criterion 6: pose integration against closed forms and an Euler oracle.
pub fn pose_integration(seed: u64) -> Check {
    let mut notes = Vec::new();
    let straight = integrate_pose(&[1.0; 10], &[0.0; 10], 0.1)?;
    let straight_err = (straight.x - 1.0).abs().max(straight.y.abs());
    let quarter = integrate_pose(&[1.0; 10], &[PI / 2.0; 10], 0.1)?;
    let quarter_err = (quarter.x - 2.0 / PI).abs().max((quarter.y - 2.0 / PI).abs());
    let euler_q = euler_pose(&[1.0; 10], &[PI / 2.0; 10], 0.1, 1_000_000);
    let euler_q_err = (euler_q.x - quarter.x).abs().max((euler_q.y - quarter.y).abs());
    notes.push(format!("straight {straight_err:.1e}, quarter circle {quarter_err:.1e}, Euler on the quarter circle {euler_q_err:.1e}"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let n = rng.gen_range(5..40);
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let p = integrate_pose(&v, &w, 0.1)?;
        let e = euler_pose(&v, &w, 0.1, 1_000_000);
        worst = worst.max(crate::eval::final_pose_error(&p, &e));
    }
    notes.push(format!("10 random sequences vs Euler: worst {worst:.1e}"));
    let passed = straight_err < 1e-9 && quarter_err < 1e-6 && euler_q_err < 1e-6 && worst < 1e-5;
    Ok((passed, notes.join("; ")))
}

/// Criterion 7: filtering and open-loop prediction succeed with finite
/// outputs for every modality subset, including the empty one.
pub fn missing_modality_totality(model: &Mrssm<f32>, dataset: &Dataset) -> Check {
    let specs = model.config().modalities.clone();
    let n = specs.len();
    let traj = dataset
        .trajectories
        .iter()
        .find(|t| t.len() >= 30)
        .ok_or_else(|| crate::Error::EmptyDataset("selftest needs a trajectory of 30+ steps".into()))?;
    let (context, horizon) = (20, 10);
    let mut checked = 0;
    for subset in Subset::all_subsets(n) {
        let observations = (0..context)
            .map(|t| traj.observation_set(&specs, t, subset))
            .collect::<Result<Vec<_>>>()?;
        let prev_actions: Vec<_> = (0..context).map(|t| traj.prev_action(t)).collect();
        let zeros = vec![vec![0.0; model.config().stoch_dim]; context];
        let init = model.initial_state(&zeros[0])?;
        let states = model.rollout_filter(&init, &prev_actions, &observations, &zeros)?;
        let last = states.last().expect("nonempty context");
        let preds = model.predict_open_loop(
            last,
            &traj.actions[context - 1..context - 1 + horizon],
            &Propagation::Mean,
            Subset::full(n),
        )?;
        let finite = states.iter().all(|s| s.h.data().iter().chain(s.s.data()).all(|v| v.is_finite()))
            && preds.iter().all(|p| p.decoded.iter().flatten().all(|d| d.data().iter().all(|v| v.is_finite())));
        if !finite {
            return Ok((false, format!("non-finite output for subset {}", subset.label(&specs))));
        }
        checked += 1;
    }
    Ok((true, format!("{checked} subsets filtered for {context} steps and predicted {horizon} steps")))
}

/// A briefly trained miniature checkpoint for criterion 7 when none is given.
pub fn quick_checkpoint(seed: u64) -> Result<(Mrssm<f32>, Dataset)> {
    let sim = SimConfig { world_size_m: 40.0, ..SimConfig::default() };
    let ds = generate_dataset(&sim, 6, 60, seed)?;
    let config = miniature_config(&ds, &[0, 1, 2, 3], Fusion::Poe)?;
    let tc = TrainingConfig { sequence_length: 20, batch_size: 4, epochs: 2, seed, elbo: ElboVariant::New, ..TrainingConfig::default() };
    let outcome = train_run(&config, &ds, &tc, None, |_| ())?;
    Ok((outcome.model, ds))
}

/// Runs criteria 1–7. With `checkpoint = None` a miniature model is trained
/// first; otherwise criterion 7 uses `checkpoint` on data simulated with
/// `sim`.
pub fn run_selftest(checkpoint: Option<&Mrssm<f32>>, sim: &SimConfig, mut log: impl FnMut(&Criterion)) -> Vec<Criterion> {
    let mut out = Vec::new();
    let mut push = |c: Criterion| {
        log(&c);
        out.push(c);
    };
    push(verdict(1, "PoE closed form vs grid integration", poe_vs_integration(100, 1)));
    push(verdict(2, "KL closed form vs Monte Carlo", kl_vs_monte_carlo(50, 1_000_000, 2)));
    push(verdict(3, "gradient checks on a miniature MRSSM", gradient_checks(3)));
    push(verdict(4, "full-set elbo_new equals elbo_mvae", full_set_equivalence(4)));
    push(verdict(5, "posterior contraction", posterior_contraction(1000, 5)));
    push(verdict(6, "pose integration vs Euler oracle", pose_integration(6)));
    let totality = match checkpoint {
        Some(model) => generate_dataset(sim, 1, 40, 7).and_then(|ds| missing_modality_totality(model, &ds)),
        None => quick_checkpoint(7).and_then(|(model, ds)| missing_modality_totality(&model, &ds)),
    };
    push(verdict(7, "missing-modality totality on a trained checkpoint", totality));
    out
}
