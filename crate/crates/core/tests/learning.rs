mod common;

use common::{demos_with_ratios, random_batch, random_obs};
use goalplay_core::abc::{AbcParams, ClipMode};
use goalplay_core::env::{Action, N_ACTIONS};
use goalplay_core::nn::{init_params, ArchitectureSpec, MultiCategorical, OutputGrad, ParamVector, PolicyOutput};
use goalplay_core::ppo::{compute_gae, minibatch_loss_and_grad, optimize, AdamState, BcTerm, PpoError, PpoHyperParams};
use goalplay_core::{Batch, Params};
use goalplay_oracles::fd::{finite_difference_grad, relative_error};
use goalplay_oracles::gae::{discounted_returns, gae_reference};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn with_values(p: &Params, theta: &[f64]) -> Params {
    ParamVector::from_values(p.spec.clone(), theta.to_vec(), p.version).unwrap()
}

fn pick_coords(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, k).into_vec()
}

fn assert_close(analytic: &[f64], numeric: &[f64], coords: &[usize], tol: f64) {
    for ((a, n), c) in analytic.iter().zip(numeric).zip(coords) {
        let e = relative_error(*a, *n, 1e-6);
        assert!(e < tol, "coordinate {c}: analytic {a:e} vs numeric {n:e} (rel {e:e})");
    }
}

#[test]
fn network_gradient_matches_finite_differences() {
    for separate in [true, false] {
        let mut rng = ChaCha8Rng::seed_from_u64(11 + separate as u64);
        let mut spec = ArchitectureSpec::small(8, 8);
        spec.separate_value_net = separate;
        let mut params: Params = init_params(&spec, 5).unwrap();
        // push the policy head off its near-zero init so its gradient is not tiny
        let head = params.policy_head_range();
        for v in params.values[head].iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let batch: Vec<_> = (0..4)
            .map(|_| {
                let k = rng.gen_range(1..=3);
                let obs = random_obs(&mut rng, k, 0.05);
                let mut d = OutputGrad::zeros(spec.n_logits());
                for g in d.dlogits.iter_mut() {
                    *g = rng.gen_range(-1.0..1.0);
                }
                d.dvalue = rng.gen_range(-1.0..1.0);
                (obs, d)
            })
            .collect();
        let analytic = params.backward(&batch).unwrap();
        let f = |theta: &[f64]| {
            let p = with_values(&params, theta);
            batch
                .iter()
                .map(|(obs, d)| {
                    let out = p.forward(obs).unwrap();
                    let flat = out.factor_logits.concat();
                    flat.iter().zip(&d.dlogits).map(|(l, g)| l * g).sum::<f64>() + out.value * d.dvalue
                })
                .sum::<f64>()
        };
        let coords = pick_coords(&mut rng, params.len(), 20);
        let numeric = finite_difference_grad(f, &params.values, &coords, H);
        let a: Vec<f64> = coords.iter().map(|&c| analytic[c]).collect();
        assert_close(&a, &numeric, &coords, 1e-4);
    }
}

#[test]
fn value_loss_gradient_touches_only_the_value_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params: Params = init_params(&ArchitectureSpec::small(8, 8), 9).unwrap();
    let obs = random_obs(&mut rng, 2, 0.05);
    let target = 0.7;
    let v = params.forward(&obs).unwrap().value;
    let mut d = OutputGrad::zeros(params.spec.n_logits());
    d.dvalue = 2.0 * (v - target);
    let g = params.backward(&[(obs.clone(), d)]).unwrap();
    let value = params.value_range();
    for (i, gi) in g.iter().enumerate() {
        if !value.contains(&i) {
            assert_eq!(*gi, 0.0, "coordinate {i} outside the value network");
        }
    }
    let coords: Vec<usize> = pick_coords(&mut rng, value.len(), 20).into_iter().map(|c| c + value.start).collect();
    let numeric = finite_difference_grad(
        |theta| {
            let v = with_values(&params, theta).forward(&obs).unwrap().value;
            (v - target) * (v - target)
        },
        &params.values,
        &coords,
        H,
    );
    let a: Vec<f64> = coords.iter().map(|&c| g[c]).collect();
    assert_close(&a, &numeric, &coords, 1e-4);
}

fn bob_fixture(seed: u64, ratios: &[f64]) -> (Params, Batch, Vec<goalplay_core::abc::DemoStep<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: Params = init_params(&ArchitectureSpec::small(8, 8), seed).unwrap();
    let head = params.policy_head_range();
    for v in params.values[head].iter_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    let batch = random_batch(&params, &mut rng, 24);
    let demos = demos_with_ratios(&params, &mut rng, ratios);
    (params, batch, demos)
}

#[test]
fn combined_bob_loss_gradient_matches_finite_differences() {
    let ratios: Vec<f64> = (0..12).map(|i| 0.85 + 0.025 * i as f64).collect();
    let (params, batch, demos) = bob_fixture(21, &ratios);
    let hp = PpoHyperParams::default();
    let abc = AbcParams::default();
    let idx: Vec<usize> = (0..batch.len()).collect();
    let bc_idx: Vec<usize> = (0..demos.len()).collect();
    let bc = BcTerm { demos: &demos, params: &abc };
    let (loss, grad) =
        minibatch_loss_and_grad(&params, &batch, &batch.advantages, &idx, Some((bc, &bc_idx)), &hp).unwrap();
    assert!(loss.abc != 0.0 && loss.total.is_finite());
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let coords = pick_coords(&mut rng, params.len(), 50);
    let numeric = finite_difference_grad(
        |theta| {
            let p = with_values(&params, theta);
            minibatch_loss_and_grad(&p, &batch, &batch.advantages, &idx, Some((bc, &bc_idx)), &hp).unwrap().0.total
        },
        &params.values,
        &coords,
        H,
    );
    let a: Vec<f64> = coords.iter().map(|&c| grad[c]).collect();
    assert_close(&a, &numeric, &coords, 1e-4);
}

fn abc_only_grad(params: &Params, demos: &[goalplay_core::abc::DemoStep<f64>], abc: &AbcParams) -> (f64, Vec<f64>) {
    let empty = Batch::default();
    let bc_idx: Vec<usize> = (0..demos.len()).collect();
    let bc = BcTerm { demos, params: abc };
    let (loss, g) =
        minibatch_loss_and_grad(params, &empty, &[], &[], Some((bc, &bc_idx)), &PpoHyperParams::default()).unwrap();
    (loss.total, g)
}

#[test]
fn abc_gradient_vanishes_outside_the_clip_band() {
    let abc = AbcParams::default();
    for (k, r) in [0.3, 0.7, 0.79, 1.21, 1.5, 4.0].into_iter().enumerate() {
        let (params, _, demos) = bob_fixture(40 + k as u64, &[r]);
        let (loss, g) = abc_only_grad(&params, &demos, &abc);
        assert!(g.iter().all(|x| *x == 0.0), "ratio {r}");
        assert!((loss - abc.beta * -(r.clamp(0.8, 1.2))).abs() < 1e-12);
        let coords: Vec<usize> = (0..params.len()).step_by(params.len() / 20).collect();
        let numeric = finite_difference_grad(
            |t| abc_only_grad(&with_values(&params, t), &demos, &abc).0,
            &params.values,
            &coords,
            H,
        );
        assert!(numeric.iter().all(|x| x.abs() < 1e-9), "ratio {r}: {numeric:?}");
    }
    // inside the band the gradient is that of -β·r
    let (params, _, demos) = bob_fixture(50, &[0.9, 1.0, 1.1]);
    let (_, g) = abc_only_grad(&params, &demos, &abc);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let coords = pick_coords(&mut rng, params.len(), 30);
    let numeric =
        finite_difference_grad(|t| abc_only_grad(&with_values(&params, t), &demos, &abc).0, &params.values, &coords, H);
    let a: Vec<f64> = coords.iter().map(|&c| g[c]).collect();
    assert_close(&a, &numeric, &coords, 1e-4);
    assert!(g.iter().any(|x| *x != 0.0));
}

#[test]
fn ppo_min_mode_keeps_gradient_below_the_band() {
    let abc = AbcParams { clip_mode: ClipMode::PpoMin, ..AbcParams::default() };
    let (params, _, demos) = bob_fixture(60, &[0.5]);
    let (_, g) = abc_only_grad(&params, &demos, &abc);
    assert!(g.iter().any(|x| *x != 0.0));
    let (params, _, demos) = bob_fixture(61, &[1.5]);
    let (_, g) = abc_only_grad(&params, &demos, &abc);
    assert!(g.iter().all(|x| *x == 0.0));
    let unclipped = AbcParams { clip_enabled: false, ..AbcParams::default() };
    let (_, g) = abc_only_grad(&params, &demos, &unclipped);
    assert!(g.iter().any(|x| *x != 0.0));
}

fn random_gae_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, Vec<bool>, f64) {
    let n = rng.gen_range(1..=60);
    let rewards = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let values = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let dones = (0..n).map(|_| rng.gen_bool(0.1)).collect();
    (rewards, values, dones, rng.gen_range(-3.0..3.0))
}

#[test]
fn gae_matches_the_explicit_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000 {
        let (r, v, d, boot) = random_gae_instance(&mut rng);
        let (gamma, lambda) =
            if case % 2 == 0 { (0.998, 0.95) } else { (rng.gen_range(0.5..1.0), rng.gen_range(0.0..=1.0)) };
        let (adv, ret) = compute_gae(&r, &v, &d, boot, gamma, lambda).unwrap();
        let expected = gae_reference(&r, &v, &d, boot, gamma, lambda);
        for t in 0..r.len() {
            assert!((adv[t] - expected[t]).abs() <= 1e-12, "case {case} t {t}: {} vs {}", adv[t], expected[t]);
            assert!((ret[t] - (adv[t] + v[t])).abs() <= 1e-12);
        }
    }
}

#[test]
fn gae_lambda_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let (r, v, d, boot) = random_gae_instance(&mut rng);
        let gamma = rng.gen_range(0.5..1.0);
        let (adv1, _) = compute_gae(&r, &v, &d, boot, gamma, 1.0).unwrap();
        let g = discounted_returns(&r, &d, boot, gamma);
        let (adv0, _) = compute_gae(&r, &v, &d, boot, gamma, 0.0).unwrap();
        for t in 0..r.len() {
            assert!((adv1[t] - (g[t] - v[t])).abs() < 1e-9);
            let next = if d[t] {
                0.0
            } else if t + 1 < r.len() {
                v[t + 1]
            } else {
                boot
            };
            assert!((adv0[t] - (r[t] + gamma * next - v[t])).abs() < 1e-12);
        }
    }
}

fn random_output(rng: &mut ChaCha8Rng) -> PolicyOutput<f64> {
    PolicyOutput {
        factor_logits: [5, 4, 3].iter().map(|&n| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect(),
        value: 0.0,
    }
}

#[test]
fn sampled_frequencies_match_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dist = MultiCategorical::new(&random_output(&mut rng));
    let n = 100_000;
    let mut counts = [vec![0u64; 5], vec![0u64; 4], vec![0u64; 3]];
    for _ in 0..n {
        let (a, lp) = dist.sample(&mut rng);
        assert_eq!(lp, dist.log_prob(&a).unwrap());
        for (f, i) in a.indices().into_iter().enumerate() {
            counts[f][i] += 1;
        }
    }
    for (f, c) in counts.iter().enumerate() {
        for (k, p) in dist.probs(f).iter().enumerate() {
            let freq = c[k] as f64 / n as f64;
            assert!((freq - p).abs() < 0.01, "factor {f} index {k}: {freq} vs {p}");
        }
    }
}

#[test]
fn joint_action_probabilities_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let dist = MultiCategorical::new(&random_output(&mut rng));
        let total: f64 = Action::all().map(|a| dist.log_prob(&a).unwrap().exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(Action::all().count(), N_ACTIONS);
    }
}

#[test]
fn ppo_learns_a_one_step_bandit() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let obs = random_obs(&mut rng, 1, 0.0);
    let mut params: Params = init_params(&ArchitectureSpec::small(16, 16), 1).unwrap();
    let hp = PpoHyperParams { learning_rate: 3e-3, minibatch_size: 32, ..PpoHyperParams::default() };
    let mut adam = AdamState::new(params.len());
    let p_arm = |p: &Params| MultiCategorical::new(&p.forward(&obs).unwrap()).probs(0)[0];
    let start = p_arm(&params);
    for _ in 0..200 {
        let mut b = Batch::default();
        let out = params.forward(&obs).unwrap();
        let dist = MultiCategorical::new(&out);
        let mut rewards = Vec::new();
        for _ in 0..64 {
            let (a, lp) = dist.sample(&mut rng);
            let r = if a.indices()[0] == 0 { 1.0 } else { 0.0 };
            rewards.push(r);
            b.observations.push(obs.clone());
            b.actions.push(a);
            b.old_log_probs.push(lp);
            b.old_values.push(out.value);
        }
        let values = vec![out.value; 64];
        let dones = vec![true; 64];
        let (adv, ret) = compute_gae(&rewards, &values, &dones, 0.0, hp.gamma, hp.gae_lambda).unwrap();
        b.rewards = rewards;
        b.dones = dones;
        b.advantages = adv;
        b.returns = ret;
        let (next, stats) = optimize(&params, &b, None, &hp, &mut adam, &mut rng).unwrap();
        assert_eq!(stats.samples_processed, hp.sample_reuse * 64);
        params = next;
    }
    let end = p_arm(&params);
    assert!(start < 0.3 && end > 0.95, "P(arm) {start} -> {end}");
}

#[test]
fn non_finite_loss_aborts_the_update() {
    let (params, mut batch, _) = bob_fixture(70, &[]);
    batch.advantages[3] = f64::NAN;
    let hp = PpoHyperParams { normalize_advantages: false, ..PpoHyperParams::default() };
    let mut adam = AdamState::new(params.len());
    let before = adam.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = optimize(&params, &batch, None, &hp, &mut adam, &mut rng).unwrap_err();
    assert!(matches!(err, PpoError::NonFinite { .. }), "{err}");
    assert_eq!(adam, before);
}

#[test]
fn bc_term_participates_in_each_minibatch() {
    let (params, batch, demos) = bob_fixture(80, &[1.0; 10]);
    let hp = PpoHyperParams { minibatch_size: 8, ..PpoHyperParams::default() };
    let abc = AbcParams::default();
    let mut adam = AdamState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (next, stats) =
        optimize(&params, &batch, Some(BcTerm { demos: &demos, params: &abc }), &hp, &mut adam, &mut rng).unwrap();
    assert_eq!(stats.minibatches, 3 * hp.sample_reuse);
    assert_eq!(stats.samples_processed, batch.len() * hp.sample_reuse);
    assert_eq!(stats.bc_samples_processed, demos.len() * hp.sample_reuse);
    assert_ne!(next.values, params.values);
}
