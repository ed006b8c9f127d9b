//! Self-contained correctness suites behind the `selftest` CLI subcommand:
//! gradient checks against finite differences plus the algebraic
//! equivalences the prototype formulation guarantees.

use crate::distance::{mean_minimizer_check, DistanceFn};
use crate::episode::Episode;
use crate::error::Result;
use crate::model::{
    classify_query, compute_prototypes, episode_loss, linear_head, matching_net_predict,
    mixture_posterior, EmbeddingNet, MixtureModel, PrototypeSet,
};
use crate::rng::Rng;
use crate::tensor::tape::{Mode, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SelfTestReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn report(name: &'static str, result: Result<(bool, String)>) -> SelfTestReport {
    match result {
        Ok((passed, detail)) => SelfTestReport {
            name,
            passed,
            detail,
        },
        Err(e) => SelfTestReport {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Run every suite; all of them are deterministic and finish in seconds.
pub fn run_selftests() -> Vec<SelfTestReport> {
    vec![
        report("gradient_check_mlp", gradient_check_mlp()),
        report("gradient_check_conv", gradient_check_conv()),
        report("one_shot_equivalence", one_shot_equivalence()),
        report("linear_head_equivalence", linear_head_equivalence()),
        report("mixture_equivalence", mixture_equivalence()),
        report("mean_minimizer_bregman", mean_minimizer_bregman()),
        report("cosine_not_bregman", cosine_not_bregman()),
    ]
}

fn random_episode(rng: &mut Rng, shape: &[usize], way: usize, shot: usize, query: usize) -> Episode {
    let numel: usize = shape.iter().product();
    let draw = |rng: &mut Rng| {
        Tensor::from_vec(
            shape.to_vec(),
            (0..numel).map(|_| rng.normal()).collect(),
        )
        .expect("example shape")
    };
    Episode {
        class_ids: (0..way as u32).collect(),
        support: (0..way).map(|_| (0..shot).map(|_| draw(rng)).collect()).collect(),
        query: (0..way).map(|_| (0..query).map(|_| draw(rng)).collect()).collect(),
    }
}

/// Worst relative error between analytic gradients and central finite
/// differences over a sampled coordinate subset.
fn episode_loss_fd_error(
    net: &mut EmbeddingNet,
    episode: &Episode,
    distance: &DistanceFn,
    coords_per_tensor: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let pass = episode_loss(&mut tape, net, episode, distance, Mode::Train)?;
    tape.backward(pass.loss)?;
    let grads: Vec<Tensor> = pass
        .forward
        .param_vars
        .iter()
        .map(|&v| tape.grad(v).expect("all parameters require gradients"))
        .collect();

    let h = 1e-5;
    let mut worst = 0.0f64;
    for pi in 0..net.params().len() {
        let numel = net.params()[pi].numel();
        let coords: Vec<usize> = if numel <= coords_per_tensor {
            (0..numel).collect()
        } else {
            (0..coords_per_tensor).map(|_| rng.below(numel as u64) as usize).collect()
        };
        for i in coords {
            let orig = net.params()[pi].data()[i];
            let eval = |net: &EmbeddingNet| -> Result<f64> {
                let mut t = Tape::new();
                let p = episode_loss(&mut t, net, episode, distance, Mode::Train)?;
                Ok(t.value(p.loss).item())
            };
            net.params_mut()[pi].data_mut()[i] = orig + h;
            let up = eval(net)?;
            net.params_mut()[pi].data_mut()[i] = orig - h;
            let down = eval(net)?;
            net.params_mut()[pi].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads[pi].data()[i];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-4));
        }
    }
    Ok(worst)
}

fn gradient_check_mlp() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for seed in 0..3u64 {
        let mut rng = Rng::new(1000 + seed);
        let mut net = EmbeddingNet::from_preset("mlp:6-8-4", &[6], &mut rng)?;
        let ep = random_episode(&mut rng, &[6], 3, 2, 2);
        worst = worst.max(episode_loss_fd_error(
            &mut net,
            &ep,
            &DistanceFn::SqEuclidean,
            usize::MAX,
            &mut rng,
        )?);
    }
    Ok((worst < 1e-4, format!("worst relative error {worst:.2e}")))
}

fn gradient_check_conv() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for seed in 0..2u64 {
        let mut rng = Rng::new(2000 + seed);
        let mut net = EmbeddingNet::from_preset("omniglot-conv", &[1, 6, 6], &mut rng)?;
        let ep = random_episode(&mut rng, &[1, 6, 6], 2, 1, 1);
        worst = worst.max(episode_loss_fd_error(
            &mut net,
            &ep,
            &DistanceFn::SqEuclidean,
            6,
            &mut rng,
        )?);
    }
    Ok((worst < 1e-4, format!("worst relative error {worst:.2e}")))
}

fn one_shot_equivalence() -> Result<(bool, String)> {
    let mut rng = Rng::new(3000);
    let net = EmbeddingNet::from_preset("mlp:5-7-4", &[5], &mut rng)?;
    let d = DistanceFn::SqEuclidean;
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let ep = random_episode(&mut rng, &[5], 4, 1, 1);
        let q = Tensor::from_vec(vec![5], (0..5).map(|_| rng.normal()).collect())?;
        let protos = compute_prototypes(&net, &ep, &d)?;
        let a = classify_query(&protos, &net.embed_one(&q)?)?;
        let b = matching_net_predict(&net, &ep, &d, &q)?;
        for (x, y) in a.probabilities().iter().zip(b.probabilities()) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok((worst < 1e-12, format!("max posterior difference {worst:.2e}")))
}

fn linear_head_equivalence() -> Result<(bool, String)> {
    let mut rng = Rng::new(4000);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let k = 2 + rng.below(5) as usize;
        let m = 1 + rng.below(8) as usize;
        let protos = PrototypeSet::new(
            Tensor::from_vec(vec![k, m], (0..k * m).map(|_| rng.uniform(-3.0, 3.0)).collect())?,
            (0..k as u32).collect(),
            DistanceFn::SqEuclidean,
        )?;
        let z: Vec<f64> = (0..m).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let direct = classify_query(&protos, &z)?;
        let (w, b) = linear_head(&protos)?;
        // softmax(Wz + b) through the mixture API with uniform weights and a
        // synthetic "distance" is overkill; recompute the softmax directly.
        let scores: Vec<f64> = (0..k)
            .map(|row| w.row(row).iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() + b[row])
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (x, e) in direct.probabilities().iter().zip(&exps) {
            worst = worst.max((x - e / total).abs());
        }
    }
    Ok((worst < 1e-10, format!("max posterior difference {worst:.2e}")))
}

fn mixture_equivalence() -> Result<(bool, String)> {
    let mut rng = Rng::new(5000);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let k = 2 + rng.below(5) as usize;
        let m = 1 + rng.below(6) as usize;
        let means =
            Tensor::from_vec(vec![k, m], (0..k * m).map(|_| rng.normal()).collect())?;
        let z: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
        let protos =
            PrototypeSet::new(means.clone(), (0..k as u32).collect(), DistanceFn::SqEuclidean)?;
        let mix = MixtureModel::uniform(means, DistanceFn::SqEuclidean)?;
        let a = classify_query(&protos, &z)?;
        let b = mixture_posterior(&mix, &z)?;
        for (x, y) in a.probabilities().iter().zip(b.probabilities()) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok((worst < 1e-10, format!("max posterior difference {worst:.2e}")))
}

fn mean_minimizer_bregman() -> Result<(bool, String)> {
    let mut rng = Rng::new(6000);
    let distances = [
        DistanceFn::SqEuclidean,
        DistanceFn::mahalanobis(vec![0.5, 2.0, 1.0, 3.5])?,
    ];
    let mut checked = 0usize;
    for d in &distances {
        for _ in 0..20 {
            let n = 2 + rng.below(6) as usize;
            let points =
                Tensor::from_vec(vec![n, 4], (0..n * 4).map(|_| rng.normal()).collect())?;
            let mut mean = vec![0.0; 4];
            for i in 0..n {
                for (m, &v) in mean.iter_mut().zip(points.row(i)) {
                    *m += v / n as f64;
                }
            }
            if !mean_minimizer_check(d, &points, &mean, 200, 0.5, &mut rng)? {
                return Ok((
                    false,
                    format!("mean lost a perturbation trial for {}", d.config_name()),
                ));
            }
            checked += 1;
        }
    }
    Ok((true, format!("{checked} point sets, 200 perturbations each")))
}

fn cosine_not_bregman() -> Result<(bool, String)> {
    // mean_minimizer_check must refuse cosine outright…
    let points = Tensor::matrix(&[vec![10.0, 0.0], vec![0.0, 1.0]])?;
    let mut rng = Rng::new(7000);
    let refused = mean_minimizer_check(
        &DistanceFn::Cosine,
        &points,
        &[5.0, 0.5],
        10,
        0.5,
        &mut rng,
    )
    .is_err();
    // …and the fixture shows why: the coordinate mean of {(10,0), (0,1)}
    // loses to the diagonal direction on total cosine distance.
    let d = DistanceFn::Cosine;
    let total = |c: &[f64]| -> Result<f64> {
        Ok(d.distance(points.row(0), c)? + d.distance(points.row(1), c)?)
    };
    let mean_cost = total(&[5.0, 0.5])?;
    let diag_cost = total(&[1.0, 1.0])?;
    let counterexample = diag_cost < mean_cost;
    Ok((
        refused && counterexample,
        format!("refused={refused}, mean cost {mean_cost:.4} vs diagonal {diag_cost:.4}"),
    ))
}

/// True when every suite passed; used by the CLI for its exit code.
pub fn all_passed(reports: &[SelfTestReport]) -> bool {
    reports.iter().all(|r| r.passed)
}
