//! Training-loop behavior: graph-vs-scalar loss agreement, zero-LR
//! invariance, run-twice determinism, the toy-generator gradient check, and
//! the gradient-penalty variant.

use fcd_core::data::{DomainLabel, PadInfo, Patch};
use fcd_core::gan::{
    self, graph_losses as gl, losses, AdversarialVariant, GanTrainConfig, GenAdvForm, LossWeights,
};
use fcd_tensor::check::{central_diff_grad, relative_error};
use fcd_tensor::graph::Graph;
use fcd_tensor::optim::Adam;
use fcd_tensor::rng::Rng;

fn make_patch(rng: &mut Rng, channels: usize, size: usize, cloudy: bool) -> Patch {
    let data: Vec<f32> = (0..channels * size * size)
        .map(|_| {
            let base = rng.uniform_f32() * 0.6 - 0.8;
            if cloudy { (base + 1.3).clamp(-1.0, 1.0) } else { base }
        })
        .collect();
    let mask: Vec<u8> = if cloudy {
        (0..size * size).map(|i| u8::from(i % 2 == 0)).collect()
    } else {
        vec![0; size * size]
    };
    Patch {
        scene_id: "fixture".into(),
        biome: Some("synthetic".into()),
        origin: (0, 0),
        channels,
        size,
        data,
        image_label: if cloudy { DomainLabel::CLOUDY } else { DomainLabel::CLEAR },
        pixel_mask: Some(mask),
        pad: PadInfo::default(),
    }
}

fn tiny_cfg(iterations: u64) -> GanTrainConfig {
    GanTrainConfig {
        iterations,
        batch_size: 4,
        g_lr: 1e-4,
        d_lr: 1e-4,
        d_steps_per_g_step: 1,
        seed: 33,
        checkpoint_every: 3,
        base_width: 4,
        res_blocks: 1,
        val_grid_points: 16,
        ..GanTrainConfig::default()
    }
}

fn fixture_patches(n: usize, channels: usize, size: usize) -> Vec<Patch> {
    let mut rng = Rng::seed_from(5);
    (0..n).map(|i| make_patch(&mut rng, channels, size, i % 2 == 0)).collect()
}

#[test]
fn graph_losses_match_scalar_oracles_on_constants() {
    let tol = 1e-6;
    let mut g = Graph::new();

    // adversarial term, batch of two identical score triples
    let s_r = g.constant(vec![0.8, 0.8], &[2]);
    let s_fs = g.constant(vec![0.3, 0.3], &[2]);
    let s_fc = g.constant(vec![0.5, 0.5], &[2]);
    let adv = gl::adversarial_term(&mut g, s_r, s_fs, s_fc);
    let oracle = losses::adversarial_loss(0.8, 0.3, 0.5).unwrap();
    assert!((g.scalar_value(adv) as f64 - oracle).abs() < tol);

    // real classification term
    let p = g.constant(vec![0.9, 0.9], &[2]);
    let cls_r = gl::cls_real_term(&mut g, p);
    let oracle = losses::domain_cls_loss_real(0.9).unwrap();
    assert!((g.scalar_value(cls_r) as f64 - oracle).abs() < tol);

    // fake classification term
    let pc = g.constant(vec![0.9], &[1]);
    let ps = g.constant(vec![0.8], &[1]);
    let cls_f = gl::cls_fake_term(&mut g, pc, ps);
    let oracle = losses::domain_cls_loss_fake(0.9, 0.8).unwrap();
    assert!((g.scalar_value(cls_f) as f64 - oracle).abs() < tol);

    // cycle and identity on constant arrays
    let x = g.constant(vec![0.0; 48], &[1, 3, 4, 4]);
    let rc = g.constant(vec![0.1; 48], &[1, 3, 4, 4]);
    let rs = g.constant(vec![0.1; 48], &[1, 3, 4, 4]);
    let cyc = gl::cycle_term(&mut g, x, rc, rs);
    let oracle = losses::cycle_consistency_loss(&[0.0; 48], &[0.1; 48], &[0.1; 48]).unwrap();
    assert!((g.scalar_value(cyc) as f64 - oracle).abs() < tol);
    assert!((g.scalar_value(cyc) as f64 - 0.2).abs() < tol);

    let t = g.constant(vec![0.25; 48], &[1, 3, 4, 4]);
    let idl = gl::identity_term(&mut g, x, t);
    let oracle = losses::conditional_identity_loss(&[0.0; 48], &[0.25; 48]).unwrap();
    assert!((g.scalar_value(idl) as f64 - oracle).abs() < tol);

    // objective compositions
    let l_d = gl::disc_objective(&mut g, adv, cls_r, 1.0);
    let od = losses::discriminator_objective(
        losses::adversarial_loss(0.8, 0.3, 0.5).unwrap(),
        losses::domain_cls_loss_real(0.9).unwrap(),
        1.0,
    );
    assert!((g.scalar_value(l_d) as f64 - od).abs() < tol);
    assert!((g.scalar_value(l_d) as f64 - 1.3784).abs() < 1e-4);

    let advt = g.constant(vec![0.5], &[1]);
    let clsf = g.constant(vec![0.3285], &[1]);
    let cycv = g.constant(vec![0.2], &[1]);
    let idv = g.constant(vec![0.25], &[1]);
    let w = LossWeights::default();
    let l_g = gl::gen_objective(&mut g, advt, clsf, cycv, idv, &w);
    assert!((g.scalar_value(l_g) as f64 - 5.3285).abs() < 1e-4);
}

#[test]
fn train_step_zero_lr_keeps_params_bitwise() {
    let patches = fixture_patches(8, 2, 8);
    let cfg = tiny_cfg(1);
    let mut gen = gan::Generator::new(
        gan::GeneratorCfg { channels: 2, base_width: 4, res_blocks: 1 },
        3,
    );
    let mut disc = gan::Discriminator::new(gan::DiscriminatorCfg { channels: 2, base_width: 4 }, 4);
    let g_before = gen.params().checksum();
    let d_before = disc.params().checksum();
    let mut g_opt = Adam::new(gen.params(), 0.5, 0.999);
    let mut d_opt = Adam::new(disc.params(), 0.5, 0.999);
    let mut rng = Rng::seed_from(1);
    let batch: Vec<&Patch> = patches.iter().take(4).collect();
    let rec = gan::train_step(
        &batch, &mut gen, &mut disc, &mut g_opt, &mut d_opt, &cfg, 1, 0.0, 0.0, &mut rng,
    )
    .unwrap();
    assert_eq!(gen.params().checksum(), g_before);
    assert_eq!(disc.params().checksum(), d_before);
    // loss record carries exactly the seven components, all finite
    for v in [rec.adv, rec.cls_r, rec.cls_f, rec.cyc, rec.id, rec.l_d, rec.l_g] {
        assert!(v.is_finite());
    }
    // composition identities hold on the record
    assert!((rec.l_d - (-rec.adv + cfg.weights.lambda_cls * rec.cls_r)).abs() < 1e-5);
}

#[test]
fn nonzero_lr_changes_params() {
    let patches = fixture_patches(8, 2, 8);
    let cfg = tiny_cfg(1);
    let mut gen = gan::Generator::new(
        gan::GeneratorCfg { channels: 2, base_width: 4, res_blocks: 1 },
        3,
    );
    let mut disc = gan::Discriminator::new(gan::DiscriminatorCfg { channels: 2, base_width: 4 }, 4);
    let g_before = gen.params().checksum();
    let mut g_opt = Adam::new(gen.params(), 0.5, 0.999);
    let mut d_opt = Adam::new(disc.params(), 0.5, 0.999);
    let mut rng = Rng::seed_from(1);
    let batch: Vec<&Patch> = patches.iter().take(4).collect();
    gan::train_step(&batch, &mut gen, &mut disc, &mut g_opt, &mut d_opt, &cfg, 1, 1e-3, 1e-3, &mut rng)
        .unwrap();
    assert_ne!(gen.params().checksum(), g_before);
}

#[test]
fn short_training_is_deterministic_and_selects_same_checkpoint() {
    let train = fixture_patches(10, 2, 8);
    let val = fixture_patches(6, 2, 8);
    let cfg = tiny_cfg(6);
    let a = gan::train_fcd(&train, &val, &cfg).unwrap();
    let b = gan::train_fcd(&train, &val, &cfg).unwrap();
    assert_eq!(a.trace.len(), b.trace.len());
    for (ra, rb) in a.trace.iter().zip(&b.trace) {
        assert_eq!(ra, rb, "loss traces diverged");
    }
    assert_eq!(a.selected.iteration, b.selected.iteration);
    assert_eq!(a.selected.params.checksum(), b.selected.params.checksum());
    assert_eq!(a.val_history, b.val_history);
    assert!(a.diverged.is_none());
    // checkpoint_every = 3 over 6 iterations -> evals at 0, 3, 6
    assert_eq!(a.val_history.len(), 3);
}

#[test]
fn checkpoint_every_equals_iterations_gives_single_eval_after_start() {
    let train = fixture_patches(8, 2, 8);
    let val = fixture_patches(4, 2, 8);
    let cfg = GanTrainConfig { iterations: 2, checkpoint_every: 2, ..tiny_cfg(2) };
    let out = gan::train_fcd(&train, &val, &cfg).unwrap();
    // one baseline eval at iteration 0 plus exactly one scheduled eval
    assert_eq!(out.val_history.len(), 2);
    assert_eq!(out.val_history[1].0, 2);
}

#[test]
fn gradient_penalty_variant_trains() {
    let train = fixture_patches(8, 2, 8);
    let val = fixture_patches(4, 2, 8);
    let cfg = GanTrainConfig {
        adversarial_variant: AdversarialVariant::GradientPenalty,
        ..tiny_cfg(2)
    };
    let out = gan::train_fcd(&train, &val, &cfg).unwrap();
    assert!(out.diverged.is_none());
    assert_eq!(out.trace.len(), 2);
    for r in &out.trace {
        for v in [r.adv, r.cls_r, r.cls_f, r.cyc, r.id, r.l_d, r.l_g] {
            assert!(v.is_finite());
        }
    }
}

#[test]
fn saturating_form_also_trains() {
    let train = fixture_patches(8, 2, 8);
    let val = fixture_patches(4, 2, 8);
    let cfg = GanTrainConfig { gen_adv_form: GenAdvForm::Saturating, ..tiny_cfg(2) };
    assert!(gan::train_fcd(&train, &val, &cfg).unwrap().diverged.is_none());
}

#[test]
fn batch_losses_are_permutation_invariant() {
    // mean reduction: reordering the batch must not change any loss value
    // beyond accumulation rounding
    let scores = [(0.8, 0.3, 0.5), (0.6, 0.2, 0.7), (0.9, 0.4, 0.1)];
    let fwd = losses::adversarial_loss_batch(&scores).unwrap();
    let mut rev = scores;
    rev.reverse();
    let bwd = losses::adversarial_loss_batch(&rev).unwrap();
    assert!((fwd - bwd).abs() < 1e-12);

    let mut g = fcd_tensor::graph::Graph::new();
    let data: Vec<f32> = (0..4 * 2 * 16).map(|i| ((i * 29) % 97) as f32 / 97.0 - 0.5).collect();
    let mut permuted = vec![0.0f32; data.len()];
    let order = [2usize, 0, 3, 1];
    for (dst, &src) in order.iter().enumerate() {
        permuted[dst * 32..(dst + 1) * 32].copy_from_slice(&data[src * 32..(src + 1) * 32]);
    }
    let a = g.constant(data, &[4, 2, 4, 4]);
    let b = g.constant(permuted, &[4, 2, 4, 4]);
    let za = g.full(0.0, &[4, 2, 4, 4]);
    let la = gl::identity_term(&mut g, a, za);
    let lb = gl::identity_term(&mut g, b, za);
    let va = g.scalar_value(la) as f64;
    let vb = g.scalar_value(lb) as f64;
    assert!((va - vb).abs() < 1e-7, "{va} vs {vb}");
}

#[test]
fn lr_schedule_is_flat_then_linear() {
    assert_eq!(gan::lr_at(1, 100, 1e-4, true), 1e-4);
    assert_eq!(gan::lr_at(50, 100, 1e-4, true), 1e-4);
    let three_quarters = gan::lr_at(75, 100, 1e-4, true);
    assert!((three_quarters - 0.5e-4).abs() < 1e-12);
    assert_eq!(gan::lr_at(100, 100, 1e-4, true), 0.0);
    assert_eq!(gan::lr_at(99, 100, 1e-4, false), 1e-4);
}

// ---- toy-generator gradient check ----
//
// G(x, c) = tanh(a*x + b*c), two parameters. The numeric side is an
// independent f64 forward written here, so the finite differences never
// touch the production code path they are checking.

struct ToyLg {
    x: Vec<f32>,
    c_same: f32,
    c_cross: f32,
}

impl ToyLg {
    fn graph_loss_and_grad(&self, params: &[f32]) -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let a = g.leaf(vec![params[0]], &[1]);
        let b = g.leaf(vec![params[1]], &[1]);
        let shape = [1usize, 2, 4, 4];
        let x = g.constant(self.x.clone(), &shape);

        let forward = |g: &mut Graph, input, cond: f32| {
            let ab = g.broadcast_all(a, &shape);
            let scaled = g.mul(ab, input);
            let bb = g.broadcast_all(b, &shape);
            let cb = g.mul_scalar(bb, cond);
            let pre = g.add(scaled, cb);
            g.tanh(pre)
        };

        let fs = forward(&mut g, x, self.c_same);
        let fc = forward(&mut g, x, self.c_cross);

        // frozen "discriminator": score = sigmoid(2*mean(y)), cls = sigmoid(3*mean(y))
        let score = |g: &mut Graph, y| {
            let m = g.mean_all(y);
            let s = g.mul_scalar(m, 2.0);
            g.sigmoid(s)
        };
        let cls_prob = |g: &mut Graph, y, label: f32| {
            let m = g.mean_all(y);
            let s = g.mul_scalar(m, 3.0);
            let logit = g.mean_per_sample(s);
            gl::prob_of_label(g, logit, &[label])
        };

        let s_fs = score(&mut g, fs);
        let s_fc = score(&mut g, fc);
        let l1 = gl::ln_eps(&mut g, s_fs);
        let l2 = gl::ln_eps(&mut g, s_fc);
        let lsum = g.add(l1, l2);
        let lm = g.mean_all(lsum);
        let adv = g.neg(lm);

        let p_cross = cls_prob(&mut g, fc, self.c_cross);
        let p_same = cls_prob(&mut g, fs, self.c_same);
        let cls_f = gl::cls_fake_term(&mut g, p_cross, p_same);

        let rc = forward(&mut g, fc, self.c_same);
        let rs = forward(&mut g, fs, self.c_same);
        let cyc = gl::cycle_term(&mut g, x, rc, rs);
        let idl = gl::identity_term(&mut g, x, fs);

        let w = LossWeights::default();
        let l_g = gl::gen_objective(&mut g, adv, cls_f, cyc, idl, &w);
        let value = g.scalar_value(l_g) as f64;
        let grads = g.backward(l_g);
        let ga = g.data(grads.get(a).unwrap())[0] as f64;
        let gb = g.data(grads.get(b).unwrap())[0] as f64;
        (value, vec![ga, gb])
    }

    /// Independent f64 oracle of the same objective.
    fn f64_loss(&self, params: &[f32]) -> f64 {
        let a = params[0] as f64;
        let b = params[1] as f64;
        let x: Vec<f64> = self.x.iter().map(|&v| v as f64).collect();
        let fwd = |input: &[f64], cond: f64| -> Vec<f64> {
            input.iter().map(|&v| (a * v + b * cond).tanh()).collect()
        };
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        let eps = 1e-8;

        let fs = fwd(&x, self.c_same as f64);
        let fc = fwd(&x, self.c_cross as f64);
        let s_fs = sigmoid(2.0 * mean(&fs));
        let s_fc = sigmoid(2.0 * mean(&fc));
        let adv = -((s_fs + eps).ln() + (s_fc + eps).ln());

        let p_of = |y: &[f64], label: f64| {
            let p = sigmoid(3.0 * mean(y));
            label * p + (1.0 - label) * (1.0 - p)
        };
        let cls_f = -(p_of(&fc, self.c_cross as f64) + eps).ln() - (p_of(&fs, self.c_same as f64) + eps).ln();

        let rc = fwd(&fc, self.c_same as f64);
        let rs = fwd(&fs, self.c_same as f64);
        let l1 = |u: &[f64], v: &[f64]| {
            u.iter().zip(v).map(|(&p, &q)| (p - q).abs()).sum::<f64>() / u.len() as f64
        };
        let cyc = l1(&x, &rc) + l1(&x, &rs);
        let idl = l1(&x, &fs);
        adv + 1.0 * cls_f + 10.0 * cyc + 10.0 * idl
    }
}

#[test]
fn toy_generator_objective_gradient_matches_finite_differences() {
    let mut rng = Rng::seed_from(21);
    let x: Vec<f32> = (0..32).map(|_| (rng.uniform_f32() - 0.5) * 1.4).collect();
    let toy = ToyLg { x, c_same: 1.0, c_cross: 0.0 };
    let params = [0.9f32, 0.15f32];

    let (graph_value, analytic) = toy.graph_loss_and_grad(&params);
    let oracle_value = toy.f64_loss(&params);
    assert!(
        (graph_value - oracle_value).abs() < 1e-5,
        "graph {graph_value} vs oracle {oracle_value}"
    );

    let numeric = central_diff_grad(|theta| toy.f64_loss(theta), &params, 1e-4);
    let err = relative_error(&analytic, &numeric);
    assert!(err <= 1e-4, "gradient rel err {err}: {analytic:?} vs {numeric:?}");
}
