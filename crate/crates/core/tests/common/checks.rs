//! Measurements behind the property criteria. Each returns the worst error
//! observed so that suites can assert on it and the acceptance report can print it.

use ndarray::{Array2, ArrayD, ArrayView2, IxDyn};
use proberlab::classifier::{cross_entropy, Architecture, Classifier};
use proberlab::counterfactual::{adc_hit_rows, objective, AscentConfig};
use proberlab::data::ImageShape;
use proberlab::flow::{Flow, FlowConfig, FlowInput};
use proberlab::metrics::{aupr, auroc, fpr_at_95_tpr, ScoredLabels};
use proberlab::nn::{grad_input, grad_params, Differentiable, Mode, Parameterized};
use proberlab::prober::{prober_loss, smooth_label, Prober, HIT, MISS};
use proberlab::stats::{exact_p, normal_p, u_statistic, Alternative, EXACT_LIMIT};
use proberlab::{seeded_rng, SeededRng};
use rand::Rng;

use super::*;

// ---- metrics ----

/// Scores with both classes present; half the instances draw from a coarse
/// grid so that ties are common.
pub fn scored_instance(rng: &mut SeededRng) -> ScoredLabels {
    loop {
        let n = rng.random_range(2..=50);
        let coarse = rng.random_bool(0.5);
        let score: Vec<f64> = (0..n)
            .map(|_| {
                if coarse {
                    rng.random_range(0..6) as f64 / 5.0
                } else {
                    rng.random_range(0.0..1.0)
                }
            })
            .collect();
        let rate = rng.random_range(0.1..0.9);
        let is_miss: Vec<bool> = (0..n).map(|_| rng.random_bool(rate)).collect();
        if is_miss.iter().any(|&m| m) && is_miss.iter().any(|&m| !m) {
            return ScoredLabels::new(score, is_miss).unwrap();
        }
    }
}

pub fn pairwise_auroc(s: &ScoredLabels) -> f64 {
    let (mut credit, mut pairs) = (0.0, 0.0);
    for i in (0..s.score.len()).filter(|&i| s.is_miss[i]) {
        for j in (0..s.score.len()).filter(|&j| !s.is_miss[j]) {
            pairs += 1.0;
            if s.score[i] > s.score[j] {
                credit += 1.0;
            } else if s.score[i] == s.score[j] {
                credit += 0.5;
            }
        }
    }
    credit / pairs
}

fn unique_desc(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    u.dedup();
    u
}

/// Every distinct score as a threshold, predicting miss for `score >= t`.
pub fn threshold_aupr(s: &ScoredLabels) -> f64 {
    let m = s.is_miss.iter().filter(|&&x| x).count() as f64;
    let (mut area, mut prev_recall) = (0.0, 0.0);
    for t in unique_desc(&s.score) {
        let flagged: Vec<usize> = (0..s.score.len()).filter(|&i| s.score[i] >= t).collect();
        let tp = flagged.iter().filter(|&&i| s.is_miss[i]).count() as f64;
        let recall = tp / m;
        area += (recall - prev_recall) * tp / flagged.len() as f64;
        prev_recall = recall;
    }
    area
}

/// Hits accepted when `p_miss <= τ` (that is `p_hit >= 1 − τ`); the tightest
/// τ reaching 95% of hits sets the false-positive rate.
pub fn threshold_fpr95(s: &ScoredLabels) -> f64 {
    let h = s.is_miss.iter().filter(|&&x| !x).count();
    let m = s.is_miss.len() - h;
    let mut taus = unique_desc(&s.score);
    taus.reverse();
    for tau in taus {
        let accepted = |miss: bool| (0..s.score.len()).filter(|&i| s.is_miss[i] == miss && s.score[i] <= tau).count();
        if 100 * accepted(false) >= 95 * h {
            return accepted(true) as f64 / m as f64;
        }
    }
    unreachable!()
}

/// Largest gap between the metrics and brute force over random instances.
pub fn metric_oracle_error(seed: u64, instances: usize) -> f64 {
    let mut rng = seeded_rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let s = scored_instance(&mut rng);
        worst = worst
            .max((auroc(&s).unwrap() - pairwise_auroc(&s)).abs())
            .max((aupr(&s).unwrap() - threshold_aupr(&s)).abs())
            .max((fpr_at_95_tpr(&s).unwrap() - threshold_fpr95(&s)).abs());
    }
    worst
}

// ---- Mann–Whitney U ----

pub fn pair_u(a: &[f64], b: &[f64]) -> f64 {
    let mut u = 0.0;
    for x in a {
        for y in b {
            if x > y {
                u += 1.0;
            } else if x == y {
                u += 0.5;
            }
        }
    }
    u
}

/// Every way of choosing which pooled values form the first group.
pub fn enumerated_p(a: &[f64], b: &[f64], alt: Alternative) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (n, n1) = (pooled.len(), a.len());
    let observed = pair_u(a, b);
    let (mut hits, mut total) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != n1 {
            continue;
        }
        let (g1, g2): (Vec<(usize, f64)>, Vec<(usize, f64)>) =
            pooled.iter().copied().enumerate().partition(|(i, _)| mask >> i & 1 == 1);
        let g1: Vec<f64> = g1.into_iter().map(|(_, v)| v).collect();
        let g2: Vec<f64> = g2.into_iter().map(|(_, v)| v).collect();
        let u = pair_u(&g1, &g2);
        total += 1;
        let extreme = match alt {
            Alternative::Greater => u >= observed,
            Alternative::Less => u <= observed,
        };
        hits += extreme as u64;
    }
    hits as f64 / total as f64
}

/// Tie-free null distribution of U by the classic recurrence
/// `f(m, n, u) = f(m − 1, n, u − n) + f(m, n − 1, u)`.
pub fn recurrence_p(a: &[f64], b: &[f64], alt: Alternative) -> f64 {
    let (m, n) = (a.len(), b.len());
    let max_u = m * n;
    // f[i][j][u]
    let mut f = vec![vec![vec![0f64; max_u + 1]; n + 1]; m + 1];
    for i in 0..=m {
        for j in 0..=n {
            if i == 0 || j == 0 {
                f[i][j][0] = 1.0;
                continue;
            }
            for u in 0..=i * j {
                let take = if u >= j { f[i - 1][j][u - j] } else { 0.0 };
                f[i][j][u] = take + f[i][j - 1][u];
            }
        }
    }
    let dist = &f[m][n];
    let total: f64 = dist.iter().sum();
    let observed = pair_u(a, b) as usize;
    let tail: f64 = match alt {
        Alternative::Greater => dist[observed..].iter().sum(),
        Alternative::Less => dist[..=observed].iter().sum(),
    };
    tail / total
}

pub fn u_sample(rng: &mut SeededRng, n: usize, shift: f64, coarse: bool) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.random_range(0.0..1.0) + shift;
            if coarse {
                (v * 4.0).round() / 4.0
            } else {
                v
            }
        })
        .collect()
}

/// Exact p against label enumeration (ties, small groups) and against the
/// recurrence (no ties, every size up to the exact cutoff).
pub fn u_exact_error(seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..150 {
        let (n1, n2) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let shift = rng.random_range(-0.5..0.5);
        let coarse = rng.random_bool(0.6);
        let a = u_sample(&mut rng, n1, shift, coarse);
        let b = u_sample(&mut rng, n2, 0.0, coarse);
        for alt in [Alternative::Greater, Alternative::Less] {
            worst = worst.max((exact_p(&a, &b, alt).unwrap() - enumerated_p(&a, &b, alt)).abs());
        }
        worst = worst.max((u_statistic(&a, &b) - pair_u(&a, &b)).abs());
    }
    let mut cases = 0;
    while cases < 100 {
        let (n1, n2) = (rng.random_range(1..=40), rng.random_range(1..=40));
        if n1 * n2 > EXACT_LIMIT {
            continue;
        }
        cases += 1;
        let shift = rng.random_range(-0.3..0.3);
        let a = u_sample(&mut rng, n1, shift, false);
        let b = u_sample(&mut rng, n2, 0.0, false);
        for alt in [Alternative::Greater, Alternative::Less] {
            worst = worst.max((exact_p(&a, &b, alt).unwrap() - recurrence_p(&a, &b, alt)).abs());
        }
    }
    worst
}

/// Largest gap between the normal approximation and the exact p for every
/// pair of group sizes from 8 up to the exact cutoff, on continuous data.
pub fn u_normal_gap(seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let mut worst: f64 = 0.0;
    for n1 in 8..=20 {
        for n2 in 8..=20 {
            if n1 * n2 > EXACT_LIMIT {
                continue;
            }
            for _ in 0..3 {
                let shift = rng.random_range(-0.4..0.4);
                let a = u_sample(&mut rng, n1, shift, false);
                let b = u_sample(&mut rng, n2, 0.0, false);
                for alt in [Alternative::Greater, Alternative::Less] {
                    let d = (normal_p(&a, &b, alt).unwrap() - exact_p(&a, &b, alt).unwrap()).abs();
                    worst = worst.max(d);
                }
            }
        }
    }
    worst
}

// ---- flow ----

pub fn jittered_flow(input: FlowInput, config: &FlowConfig, offset: usize, rng: &mut SeededRng, amp: f64) -> Flow {
    let mut f = Flow::with_mask_offset(input, config, offset).unwrap();
    for p in f.parameters_mut() {
        p.mapv_inplace(|v| v + rng.random_range(-amp..amp));
    }
    f
}

pub fn small_flow_config() -> FlowConfig {
    FlowConfig {
        coupling_layers: 4,
        hidden: 8,
        ..FlowConfig::toy()
    }
}

/// ∞-norm round-trip error in both directions, vector flows of dims 2..=6
/// and an image flow with logit preprocessing.
pub fn flow_round_trip_error(seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let mut worst: f64 = 0.0;
    for dim in 2..=6 {
        let f = jittered_flow(FlowInput::Vector { dim }, &small_flow_config(), 0, &mut rng, 0.5);
        for _ in 0..10 {
            let z = random_vec(&mut rng, dim, -3.0, 3.0);
            let (x, _) = f.forward(&z).unwrap();
            worst = worst.max(inf_norm_diff(&f.inverse(&x).unwrap(), &z));
            let x = random_vec(&mut rng, dim, -3.0, 3.0);
            let (x2, _) = f.forward(&f.inverse(&x).unwrap()).unwrap();
            worst = worst.max(inf_norm_diff(&x2, &x));
        }
    }
    let shape = ImageShape::new(4, 4, 1);
    let cfg = FlowConfig {
        coupling_layers: 6,
        hidden: 8,
        ..FlowConfig::default()
    };
    let f = jittered_flow(FlowInput::Image { shape }, &cfg, 0, &mut rng, 0.3);
    for _ in 0..10 {
        let x: Vec<f64> = (0..16).map(|_| (rng.random_range(0..256) as f64) / 255.0).collect();
        let (x2, _) = f.forward(&f.inverse(&x).unwrap()).unwrap();
        worst = worst.max(inf_norm_diff(&x2, &x));
    }
    worst
}

/// Relative error of the forward log-det against `log |det J|` of a
/// finite-difference Jacobian, dims 2..=6; inverse log-dets must cancel.
pub fn flow_logdet_error(seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let mut worst: f64 = 0.0;
    for dim in 2..=6 {
        let f = jittered_flow(FlowInput::Vector { dim }, &small_flow_config(), 0, &mut rng, 0.5);
        for _ in 0..3 {
            let z = random_vec(&mut rng, dim, -2.0, 2.0);
            let (x, ld) = f.forward(&z).unwrap();
            let numeric = log_abs_det(fd_jacobian(|v| f.forward(v).unwrap().0, &z));
            worst = worst.max(rel_err(ld, numeric));
            let (_, ld_inv) = f.inverse_with_logdet(&x).unwrap();
            worst = worst.max((ld + ld_inv).abs());
        }
    }
    worst
}

// ---- gradients ----

pub fn tiny_cnn(rng: &mut SeededRng, dropout: f64) -> Classifier {
    let arch = Architecture::Cnn4 {
        widths: [3, 4, 5, 6],
        dropout,
    };
    Classifier::new(arch, ImageShape::new(16, 16, 2), 4, (0.4, 0.3), rng).unwrap()
}

pub fn tiny_mlp(rng: &mut SeededRng) -> Classifier {
    let arch = Architecture::Mlp {
        hidden: vec![7, 5],
        dropout: 0.2,
    };
    Classifier::new(arch, ImageShape::new(3, 3, 1), 3, (0.5, 0.25), rng).unwrap()
}

/// Moves every parameter off its initial value so no unit sits exactly on a
/// ReLU kink (zero-initialized biases make that likely for tiny inputs).
pub fn jitter_params<M: Parameterized>(m: &mut M, rng: &mut SeededRng, amp: f64) {
    for p in m.parameters_mut() {
        p.mapv_inplace(|v| v + rng.random_range(-amp..amp));
    }
}

/// Perturbs batch-norm running statistics so evaluation mode is not the identity.
pub fn randomize_buffers(c: &mut Classifier, rng: &mut SeededRng) {
    for l in c.features.layers.iter_mut() {
        for (i, b) in l.buffers_mut().into_iter().enumerate() {
            b.mapv_inplace(|_| if i == 0 { rng.random_range(-0.3..0.3) } else { rng.random_range(0.5..1.5) });
        }
    }
}

pub fn input_grad_error(m: &dyn Differentiable, rng: &mut SeededRng, points: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let x = random_vec(rng, m.input_len(), 0.0, 1.0);
        for head in 0..m.output_len() {
            let g = grad_input(m, &x, head).unwrap();
            let coords = sample_coords(rng, x.len(), 40);
            let num = fd_grad(|v| m.eval(v).unwrap()[head], &x, &coords);
            let ana: Vec<f64> = coords.iter().map(|&i| g[i]).collect();
            worst = worst.max(max_rel_err(&ana, &num));
        }
    }
    worst
}

/// Parameter gradients of a scalar loss on a batch, through the public
/// `grad_params` entry point, against finite differences on sampled coordinates.
pub fn param_grad_error<M: Parameterized + Clone>(m: &M, batch: ArrayView2<f64>, rng: &mut SeededRng) -> f64 {
    let w = Array2::from_shape_fn((batch.nrows(), m.output_len()), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0);
    let loss = |out: ArrayView2<f64>| -> (f64, Array2<f64>) {
        let v = (&out * &out * 0.5 + &out * &w).sum();
        (v, &out + &w)
    };
    let (_, grads) = grad_params(m, batch, &loss).unwrap();
    let eval_loss = |model: &M| -> f64 {
        let mut out = Array2::zeros((batch.nrows(), model.output_len()));
        for (i, row) in batch.rows().into_iter().enumerate() {
            let y = model.eval(&row.to_vec()).unwrap();
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&y));
        }
        loss(out.view()).0
    };
    let mut worst: f64 = 0.0;
    for (pi, (_, g)) in grads.iter().enumerate() {
        let coords = sample_coords(rng, g.len(), 12);
        let num = fd_grad(
            |v| {
                let mut mm = m.clone();
                let p = &mut mm.parameters_mut()[pi];
                p.as_slice_mut().unwrap().copy_from_slice(v);
                eval_loss(&mm)
            },
            m.parameters()[pi].1.as_slice().unwrap(),
            &coords,
        );
        let ana: Vec<f64> = coords.iter().map(|&i| g.as_slice().unwrap()[i]).collect();
        worst = worst.max(max_rel_err(&ana, &num));
    }
    worst
}

/// Training-mode backward (batch statistics in batch norm) against finite
/// differences of the training cross-entropy.
pub fn training_grad_error(seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let mut cnn = tiny_cnn(&mut rng, 0.0);
    jitter_params(&mut cnn, &mut rng, 0.1);
    let x = ArrayD::from_shape_fn(IxDyn(&[4, cnn.input_len()]), |_| rng.random_range(0.0..1.0));
    let labels = vec![0, 1, 2, 3];
    let loss_of = |m: &Classifier| -> f64 {
        let mut r = seeded_rng(0);
        let (rep, _) = m.features.forward(x.clone(), &mut Mode::Train(&mut r));
        let (logits, _) = m.head.forward(rep, &mut Mode::Train(&mut r));
        let logits = logits.into_dimensionality::<ndarray::Ix2>().unwrap();
        cross_entropy(logits.view(), &labels).0
    };
    let mut r = seeded_rng(0);
    let (rep, ft) = cnn.features.forward(x.clone(), &mut Mode::Train(&mut r));
    let (logits, ht) = cnn.head.forward(rep, &mut Mode::Train(&mut r));
    let logits = logits.into_dimensionality::<ndarray::Ix2>().unwrap();
    let (_, g) = cross_entropy(logits.view(), &labels);
    let (grep, mut hg) = cnn.head.backward(&ht, g.into_dyn());
    let (_, mut grads) = cnn.features.backward(&ft, grep);
    grads.append(&mut hg);

    let mut worst: f64 = 0.0;
    for (pi, g) in grads.iter().enumerate() {
        let coords = sample_coords(&mut rng, g.len(), 12);
        let base = cnn.parameters()[pi].1.as_slice().unwrap().to_vec();
        let num = fd_grad(
            |v| {
                let mut mm = cnn.clone();
                mm.parameters_mut()[pi].as_slice_mut().unwrap().copy_from_slice(v);
                loss_of(&mm)
            },
            &base,
            &coords,
        );
        let ana: Vec<f64> = coords.iter().map(|&i| g.as_slice().unwrap()[i]).collect();
        worst = worst.max(max_rel_err(&ana, &num));
    }
    worst
}

/// A vector flow and a logit-preprocessed image flow, jittered.
pub fn tiny_flows(rng: &mut SeededRng) -> Vec<Flow> {
    let vector = FlowConfig {
        coupling_layers: 4,
        hidden: 6,
        ..FlowConfig::toy()
    };
    let image = FlowConfig {
        coupling_layers: 6,
        hidden: 6,
        ..FlowConfig::default()
    };
    let shape = ImageShape::new(4, 4, 1);
    let mut flows = vec![
        Flow::new(FlowInput::Vector { dim: 5 }, &vector).unwrap(),
        Flow::new(FlowInput::Image { shape }, &image).unwrap(),
    ];
    for f in &mut flows {
        jitter_params(f, rng, 0.3);
    }
    flows
}

/// Gradients of the mean negative log-likelihood with respect to every parameter tensor.
pub fn flow_nll_grad_error(f: &Flow, rng: &mut SeededRng) -> f64 {
    let x = Array2::from_shape_fn((4, f.dim()), |_| rng.random_range(0.05..0.95));
    let (_, grads) = f.nll_and_grads(x.view()).unwrap();
    let mut worst: f64 = 0.0;
    for (pi, g) in grads.iter().enumerate() {
        let coords = sample_coords(rng, g.len(), 10);
        let base = f.parameters()[pi].1.as_slice().unwrap().to_vec();
        let num = fd_grad(
            |v| {
                let mut mm = f.clone();
                mm.parameters_mut()[pi].as_slice_mut().unwrap().copy_from_slice(v);
                mm.nll_and_grads(x.view()).unwrap().0
            },
            &base,
            &coords,
        );
        let ana: Vec<f64> = coords.iter().map(|&i| g.as_slice().unwrap()[i]).collect();
        worst = worst.max(max_rel_err(&ana, &num));
    }
    worst
}

/// Input gradient of the prober's hit logit. The net is piecewise linear, so
/// away from a kink the difference quotient does not depend on the step;
/// points where it does are redrawn.
pub fn hit_logit_grad_error(seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let mut prober = Prober::new(8, [7, 5], 11).unwrap();
    jitter_params(&mut prober, &mut rng, 0.1);
    let f = |x: &[f64]| prober.hit_logit(x).unwrap();
    let coords: Vec<usize> = (0..8).collect();
    let (mut worst, mut checked): (f64, usize) = (0.0, 0);
    while checked < 20 {
        let rep = random_vec(&mut rng, 8, -1.5, 1.5);
        let fd = fd_grad(f, &rep, &coords);
        let half: Vec<f64> = coords
            .iter()
            .map(|&i| {
                let mut x = rep.clone();
                x[i] += FD_STEP / 2.0;
                let up = f(&x);
                x[i] -= FD_STEP;
                (up - f(&x)) / FD_STEP
            })
            .collect();
        if max_rel_err(&fd, &half) > 1e-8 {
            continue;
        }
        worst = worst.max(max_rel_err(&prober.hit_logit_grad(&rep).unwrap(), &fd));
        checked += 1;
    }
    worst
}

/// Classifier, prober and flow on 3×3 images, jittered.
pub fn small_stack(rng: &mut SeededRng, logit: bool) -> (Classifier, Prober, Flow) {
    let shape = ImageShape::new(3, 3, 1);
    let arch = Architecture::Mlp {
        hidden: vec![7, 5],
        dropout: 0.0,
    };
    let mut c = Classifier::new(arch, shape, 3, (0.5, 0.25), rng).unwrap();
    let mut p = Prober::new(5, [6, 4], 1).unwrap();
    let cfg = FlowConfig {
        coupling_layers: 4,
        hidden: 8,
        logit_lambda: logit.then_some(1e-6),
        ..FlowConfig::toy()
    };
    let mut f = Flow::new(FlowInput::Image { shape }, &cfg).unwrap();
    jitter_params(&mut c, rng, 0.1);
    jitter_params(&mut p, rng, 0.1);
    jitter_params(&mut f, rng, 0.1);
    (c, p, f)
}

/// Latent-space gradient of the hit logit through flow, classifier and prober.
pub fn composed_grad_error(seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let mut worst: f64 = 0.0;
    for logit in [false, true] {
        let (c, p, f) = small_stack(&mut rng, logit);
        for _ in 0..3 {
            let x = random_vec(&mut rng, 9, 0.1, 0.9);
            let z0 = f.inverse(&x).unwrap();
            let row = Array2::from_shape_vec((1, 9), z0.clone()).unwrap();
            let o = objective(&c, &p, &f, row.view()).unwrap();
            let logit_at = |z: &[f64]| {
                let r = Array2::from_shape_vec((1, 9), z.to_vec()).unwrap();
                objective(&c, &p, &f, r.view()).unwrap().hit_logit[0]
            };
            let num = fd_grad(logit_at, &z0, &(0..9).collect::<Vec<_>>());
            worst = worst.max(max_rel_err(&o.grad.row(0).to_vec(), &num));
        }
    }
    worst
}

/// Worst relative error over every differentiable module and the composed objective.
pub fn gradient_contract_error(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = seeded_rng(seed);
    let mut out = Vec::new();
    let mut cnn = tiny_cnn(&mut rng, 0.3);
    jitter_params(&mut cnn, &mut rng, 0.1);
    randomize_buffers(&mut cnn, &mut rng);
    out.push(("cnn input", input_grad_error(&cnn, &mut rng, 3)));
    let batch = Array2::from_shape_fn((3, cnn.input_len()), |_| rng.random_range(0.0..1.0));
    out.push(("cnn parameters", param_grad_error(&cnn, batch.view(), &mut rng)));
    let mut mlp = tiny_mlp(&mut rng);
    jitter_params(&mut mlp, &mut rng, 0.1);
    out.push(("mlp input", input_grad_error(&mlp, &mut rng, 3)));
    let batch = Array2::from_shape_fn((4, mlp.input_len()), |_| rng.random_range(0.0..1.0));
    out.push(("mlp parameters", param_grad_error(&mlp, batch.view(), &mut rng)));
    out.push(("cnn training mode", training_grad_error(seed + 1)));
    for (i, f) in tiny_flows(&mut rng).iter().enumerate() {
        out.push((["vector flow decode", "image flow decode"][i], input_grad_error(f, &mut rng, 3)));
        let batch = Array2::from_shape_fn((3, f.dim()), |_| rng.random_range(-1.0..1.0));
        out.push((["vector flow parameters", "image flow parameters"][i], param_grad_error(f, batch.view(), &mut rng)));
        out.push((["vector flow likelihood", "image flow likelihood"][i], flow_nll_grad_error(f, &mut rng)));
    }
    out.push(("prober hit logit", hit_logit_grad_error(seed + 2)));
    out.push(("composed objective", composed_grad_error(seed + 3)));
    out
}

// ---- prober loss ----

/// The prober loss written out term by term for two classes.
pub fn scalar_loss(q0: f64, q1: f64, p0: f64, p1: f64, w: f64) -> f64 {
    -(q0 * p0.ln() + w * (1.0 - q0) * (1.0 - p0).ln()) - (q1 * p1.ln() + w * (1.0 - q1) * (1.0 - p1).ln())
}

/// Worst deviation across the loss identities: smoothed targets summing to 1
/// (must be exactly 0), the scalar expression on 100 random `(q, p, w)`, and
/// the cross-entropy reductions.
pub fn loss_algebra_error(seed: u64) -> (f64, f64) {
    let mut rng = seeded_rng(seed);
    let mut sum_gap: f64 = 0.0;
    for _ in 0..1000 {
        let alpha = rng.random_range(0.0..1.0);
        for o in [MISS, HIT] {
            let q = smooth_label(o, alpha, 2).unwrap();
            sum_gap = sum_gap.max((q[0] + q[1] - 1.0).abs());
        }
    }
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let q1 = rng.random_range(0.0..1.0);
        let p1 = rng.random_range(0.01..0.99);
        let w = rng.random_range(0.0..5.0);
        let got = prober_loss(&[1.0 - q1, q1], &[1.0 - p1, p1], w).unwrap();
        let want = scalar_loss(1.0 - q1, q1, 1.0 - p1, p1, w);
        worst = worst.max((got - want).abs() / want.abs().max(1.0));

        let p = [1.0 - p1, p1];
        let hard = smooth_label(HIT, 0.0, 2).unwrap();
        worst = worst.max((prober_loss(&hard, &p, 0.0).unwrap() + p1.ln()).abs());
        let alpha = rng.random_range(0.0..0.9);
        let qs = smooth_label(MISS, alpha, 2).unwrap();
        let ce = -(qs[0] * p[0].ln() + qs[1] * p[1].ln());
        worst = worst.max((prober_loss(&qs, &p, 0.0).unwrap() - ce).abs());
        let w = rng.random_range(0.0..5.0);
        let two = prober_loss(&hard, &p, w).unwrap();
        worst = worst.max((two + (1.0 + w) * p1.ln()).abs() / two.abs().max(1.0));
    }
    (sum_gap, worst)
}

// ---- counterfactual identity ----

/// Largest `|cf − x|` when the ascent takes no steps.
pub fn zero_step_identity_error(seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let (c, p, f) = small_stack(&mut rng, true);
    let config = AscentConfig {
        step_size: 0.0,
        ..AscentConfig::default()
    };
    let xs = Array2::from_shape_fn((5, 9), |_| rng.random_range(0.0..1.0));
    let res = adc_hit_rows(xs.view(), &[0, 1, 2, 0, 1], &[0, 1, 2, 3, 4], &c, &p, &f, &config).unwrap();
    let mut worst: f64 = 0.0;
    for (k, r) in res.iter().enumerate() {
        assert_eq!(r.iterations, 0);
        worst = worst.max(inf_norm_diff(&r.cf, &xs.row(k).to_vec()));
    }
    worst
}
