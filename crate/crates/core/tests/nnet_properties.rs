mod common;

use common::{onehot, random_problem, random_problem_with, transplant, Problem};
use contlearn::nnet::{
    adam_step, evaluate_accuracy, forward, forward_batch_eval, loss_and_grad, loss_and_grad_grouped,
    loss_and_pooled_grad, Example, Mode, ModelConfig,
    OptimState, Scalar, WeightSnapshot,
};
use contlearn::Error;
use proptest::prelude::*;

fn zero_taskmod_matches_plain<S: Scalar>(p: &Problem, tol: f64) {
    let mut w = p.weights.cast::<S>();
    let tm = w.layout().tensor("taskmod").unwrap().range();
    w.params[tm].iter_mut().for_each(|v| *v = S::zero());
    let plain = transplant(&w, &ModelConfig { task_mod_layer: None, ..p.config.clone() });
    let n = p.config.n_tasks;
    for (im, &t) in p.images_as::<S>().iter().zip(&p.tasks) {
        for mode in [Mode::Train, Mode::Eval] {
            let a = forward(&w, im, &onehot::<S>(n, t), mode).unwrap();
            let b = forward(&plain, im, &onehot::<S>(n, t), mode).unwrap();
            if tol == 0.0 {
                assert_eq!(a, b);
            } else {
                assert!((a - b).abs().to_f64().unwrap() <= tol);
            }
        }
    }
}

/// Permutes the task inputs: task `t` of the original becomes task `perm[t]`.
fn permute_tasks(w: &WeightSnapshot<f64>, perm: &[usize]) -> WeightSnapshot<f64> {
    let layout = w.layout();
    let mut out = w.clone();
    let fc1 = layout.tensor("fc1.weight").unwrap();
    let (rows, cols) = (fc1.shape[0], fc1.shape[1]);
    let features = cols - perm.len();
    for r in 0..rows {
        for (t, &pt) in perm.iter().enumerate() {
            out.params[fc1.offset + r * cols + features + pt] = w.params[fc1.offset + r * cols + features + t];
        }
    }
    if let Some(tm) = layout.tensor("taskmod") {
        let c = tm.shape[1];
        for (t, &pt) in perm.iter().enumerate() {
            for k in 0..c {
                out.params[tm.offset + pt * c + k] = w.params[tm.offset + t * c + k];
            }
        }
    }
    out
}

/// Network whose logit is +20 for task 0 and -20 for every other task.
fn saturated(p: &Problem) -> WeightSnapshot<f64> {
    let mut w = p.weights.clone();
    let layout = w.layout();
    let fc1 = layout.tensor("fc1.weight").unwrap();
    let cols = fc1.shape[1];
    let features = cols - p.config.n_tasks;
    for name in ["fc1.weight", "fc1.bias", "out.weight", "out.bias"] {
        let r = layout.tensor(name).unwrap().range();
        w.params[r].iter_mut().for_each(|v| *v = 0.0);
    }
    w.params[fc1.offset + features] = 40.0;
    w.params[layout.tensor("out.weight").unwrap().offset] = 1.0;
    w.params[layout.tensor("out.bias").unwrap().offset] = -20.0;
    w
}

#[test]
fn zero_taskmod_is_identity_f64() {
    for seed in 0..20 {
        zero_taskmod_matches_plain::<f64>(&random_problem_with(seed, 5, 0.3), 0.0);
    }
}

#[test]
fn zero_taskmod_is_identity_f32() {
    for seed in 0..20 {
        zero_taskmod_matches_plain::<f32>(&random_problem_with(seed, 5, 0.3), 1e-6);
    }
}

#[test]
fn eval_forward_is_pure() {
    let p = random_problem_with(3, 6, 0.3);
    let mut w = p.weights.clone();
    let imgs = p.images_as::<f64>();
    let stats = loss_and_grad(&w, &p.batch(&imgs)).unwrap().stats;
    w.update_running_stats(&stats, 0.1);
    let before = w.clone();
    let n = p.config.n_tasks;
    let first: Vec<f64> = imgs.iter().zip(&p.tasks).map(|(im, &t)| forward(&w, im, &onehot(n, t), Mode::Eval).unwrap()).collect();
    let second: Vec<f64> = imgs.iter().zip(&p.tasks).map(|(im, &t)| forward(&w, im, &onehot(n, t), Mode::Eval).unwrap()).collect();
    assert_eq!(first, second);
    let refs: Vec<&[f64]> = imgs.iter().map(|v| v.as_slice()).collect();
    assert_eq!(forward_batch_eval(&w, &refs, &p.tasks), first);
    assert_eq!(w, before);
}

#[test]
fn forward_rejects_bad_task_vectors() {
    let p = random_problem(1, 1);
    let im = &p.images[0];
    let n = p.config.n_tasks;
    let mut two = onehot::<f64>(n, 0);
    two[1] = 1.0;
    assert!(matches!(forward(&p.weights, im, &two, Mode::Eval), Err(Error::Shape(_))));
    assert!(matches!(forward(&p.weights, im, &onehot::<f64>(n + 1, 0), Mode::Eval), Err(Error::Shape(_))));
    assert!(matches!(forward(&p.weights, &im[1..], &onehot::<f64>(n, 0), Mode::Eval), Err(Error::Shape(_))));
}

#[test]
fn empty_batch_is_rejected() {
    let p = random_problem(1, 1);
    assert!(loss_and_grad::<f64>(&p.weights, &[]).is_err());
}

#[test]
fn saturated_correct_predictions_have_no_loss() {
    let mut p = random_problem(5, 8);
    p.labels = p.tasks.iter().map(|&t| t == 0).collect();
    let w = saturated(&p);
    let imgs = p.images_as::<f64>();
    let lg = loss_and_grad(&w, &p.batch(&imgs)).unwrap();
    let norm = lg.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    assert!(lg.loss < 1e-8, "loss {}", lg.loss);
    assert!(norm < 1e-6, "gradient norm {norm}");
}

#[test]
fn perfect_network_scores_one() {
    let mut p = random_problem(6, 12);
    p.tasks = (0..12).map(|i| i % p.config.n_tasks).collect();
    p.labels = p.tasks.iter().map(|&t| t == 0).collect();
    let w = saturated(&p);
    let imgs = p.images_as::<f64>();
    assert_eq!(evaluate_accuracy(&w, &p.batch(&imgs)), 1.0);
}

#[test]
fn constant_zero_network_guesses_half() {
    let mut p = random_problem(2, 10);
    p.weights.params.iter_mut().for_each(|v| *v = 0.0);
    p.labels = (0..10).map(|i| i % 2 == 0).collect();
    let imgs = p.images_as::<f64>();
    let logits = forward_batch_eval(&p.weights, &imgs.iter().map(|v| v.as_slice()).collect::<Vec<_>>(), &p.tasks);
    assert!(logits.iter().all(|&l| l == 0.0));
    assert_eq!(evaluate_accuracy(&p.weights, &p.batch(&imgs)), 0.5);
}

#[test]
fn accuracy_of_union_is_weighted_mean() {
    let p = random_problem_with(9, 150, 0.3);
    let imgs = p.images_as::<f64>();
    let all = p.batch(&imgs);
    let (a, b) = all.split_at(37);
    let acc = |xs: &[Example<'_, f64>]| evaluate_accuracy(&p.weights, xs);
    let expected = (acc(a) * a.len() as f64 + acc(b) * b.len() as f64) / all.len() as f64;
    assert!((acc(&all) - expected).abs() < 1e-12);
}

#[test]
fn training_a_clone_leaves_the_original_alone() {
    let p = random_problem_with(4, 8, 0.3);
    let original = p.weights.cast::<f32>();
    let imgs = p.images_as::<f32>();
    let refs: Vec<&[f32]> = imgs.iter().map(|v| v.as_slice()).collect();
    let before = forward_batch_eval(&original, &refs, &p.tasks);

    let mut clone = original.clone();
    let mask = clone.layout().decay_mask();
    let mut opt = OptimState::<f32>::new(clone.params.len(), 1e-3, 1e-4);
    for _ in 0..100 {
        let lg = loss_and_grad(&clone, &p.batch(&imgs)).unwrap();
        adam_step(&mut clone.params, &lg.grad, &mask, &mut opt).unwrap();
        clone.update_running_stats(&lg.stats, 0.1);
    }
    assert_ne!(forward_batch_eval(&clone, &refs, &p.tasks), before);
    assert_eq!(forward_batch_eval(&original, &refs, &p.tasks), before);
}

#[test]
fn loss_and_grad_is_deterministic() {
    let p = random_problem_with(8, 6, 0.3);
    let imgs = p.images_as::<f32>();
    let w = p.weights.cast::<f32>();
    let a = loss_and_grad(&w, &p.batch(&imgs)).unwrap();
    let b = loss_and_grad(&w, &p.batch(&imgs)).unwrap();
    assert_eq!(a.loss, b.loss);
    assert_eq!(a.grad, b.grad);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn permuted_task_inputs_give_identical_logits(seed in 0u64..1_000, rot in 1usize..6) {
        let p = random_problem_with(seed, 4, 0.3);
        let n = p.config.n_tasks;
        let perm: Vec<usize> = (0..n).map(|t| (t + rot) % n).collect();
        let q = permute_tasks(&p.weights, &perm);
        for (im, &t) in p.images.iter().zip(&p.tasks) {
            for mode in [Mode::Train, Mode::Eval] {
                let a = forward(&p.weights, im, &onehot::<f64>(n, t), mode).unwrap();
                let b = forward(&q, im, &onehot::<f64>(n, perm[t]), mode).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn duplicating_the_batch_changes_nothing(seed in 0u64..1_000) {
        let p = random_problem_with(seed, 4, 0.3);
        let imgs = p.images_as::<f64>();
        let batch = p.batch(&imgs);
        let doubled: Vec<Example<'_, f64>> = batch.iter().flat_map(|e| [*e, *e]).collect();
        let a = loss_and_grad(&p.weights, &batch).unwrap();
        let b = loss_and_grad(&p.weights, &doubled).unwrap();
        prop_assert!((a.loss - b.loss).abs() <= 1e-12 * a.loss.abs().max(1.0));
        let scale = a.grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for (x, y) in a.grad.iter().zip(&b.grad) {
            prop_assert!((x - y).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn pooled_gradient_sums_the_groups(seed in 0u64..1_000) {
        let p = random_problem_with(seed, 6, 0.3);
        let mut other = p.weights.clone();
        for x in &mut other.params {
            *x *= 0.9;
        }
        let imgs = p.images_as::<f64>();
        let batch = p.batch(&imgs);
        let groups: Vec<usize> = (0..batch.len()).map(|e| e % 2).collect();
        let sets = [&p.weights, &other];
        let (loss, grads, _) = loss_and_grad_grouped(&sets, &groups, &batch).unwrap();
        let pooled = loss_and_pooled_grad(&sets, &groups, &batch).unwrap();
        prop_assert_eq!(loss, pooled.loss);
        let scale = pooled.grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for (i, x) in pooled.grad.iter().enumerate() {
            prop_assert!((x - (grads[0][i] + grads[1][i])).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn pooling_identical_sets_is_exact(seed in 0u64..1_000) {
        let p = random_problem_with(seed, 6, 0.3);
        let w = p.weights.cast::<f32>();
        let imgs = p.images_as::<f32>();
        let batch = p.batch(&imgs);
        let groups: Vec<usize> = (0..batch.len()).map(|e| e % 3).collect();
        let pooled = loss_and_pooled_grad(&[&w, &w.clone(), &w.clone()], &groups, &batch).unwrap();
        let plain = loss_and_grad(&w, &batch).unwrap();
        prop_assert_eq!(pooled.loss, plain.loss);
        prop_assert_eq!(pooled.grad, plain.grad);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn zero_taskmod_identity_random_inputs(seed in 0u64..10_000) {
        zero_taskmod_matches_plain::<f64>(&random_problem_with(seed, 1, 0.3), 0.0);
    }
}
