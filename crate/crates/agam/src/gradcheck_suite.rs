//! Finite-difference verification of every differentiable operation and of
//! the composed training loss, as a pass/fail table.

use std::fmt::Write as _;

use agam_core::agam::{agam_forward, AgamConfig, Branch, BranchParams, BranchVars};
use agam_core::alignment::{alt_alignment, soft_margin_alignment, AlignmentConfig, AlignmentLoss};
use agam_core::autodiff::{Graph, PoolMode, Var};
use agam_core::engine::{build_episode_graph, run_episode, ForwardMode};
use agam_core::episode::{Class, Dataset, Episode, Sample, Splits};
use agam_core::gradcheck::{finite_diff_check, relative_error, GradCheck, DEFAULT_EPS};
use agam_core::heads::{
    class_mean_maps, matchingnet_logp, metric_classification_loss, protonet_logp, prototypes,
    relation_mse_loss, relationnet_scores, Reduction, RelationParams, RelationVars,
};
use agam_core::model::{AblationFlags, BackboneConfig, Model, ModelConfig};
use agam_core::{Result, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Maximum relative error for a row to pass.
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: u64 = 20;

type CaseFn = Box<dyn Fn(u64) -> Result<GradCheck>>;

pub struct Case {
    pub name: &'static str,
    pub run: CaseFn,
}

impl Case {
    pub fn new(name: &'static str, run: impl Fn(u64) -> Result<GradCheck> + 'static) -> Self {
        Case { name, run: Box::new(run) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub name: &'static str,
    /// Worst relative error over all seeds (infinite if a seed errored).
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub error: Option<String>,
}

impl Row {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel_error < TOLERANCE
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Magnitudes in `[lo, hi)` with random sign.
fn away_from_zero(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(lo..hi);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Shuffled values in `(-1, 1)` at least `1/n` apart: no near-ties for the
/// max pools within a finite-difference step.
fn spaced_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n)
        .map(|i| (2.0 * (i as f64 + rng.gen_range(0.25..0.75))) / n as f64 - 1.0)
        .collect();
    v.shuffle(rng);
    Tensor::from_fn(shape, |i| v[i])
}

/// Distinct cotangent per output element.
fn weighted(g: &mut Graph, y: Var, salt: usize) -> Result<Var> {
    let w = Tensor::from_fn(g.shape(y), |i| 0.3 + ((i * 7 + salt) % 11) as f64 * 0.1);
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

fn op_case(
    name: &'static str,
    inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + Copy + 'static,
) -> Case {
    Case::new(name, move |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        finite_diff_check(f, &inputs(&mut rng), DEFAULT_EPS)
    })
}

/// Values bounded away from the kinks at 0 and ±1.
fn away_from_kinks(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(&[n], |_| {
        let mut v: f64 = rng.gen_range(0.05..2.5);
        if (v - 1.0).abs() < 0.05 {
            v += 0.1;
        }
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn op_cases() -> Vec<Case> {
    let mut cases = vec![
        op_case(
            "conv2d",
            |r| vec![rand_tensor(&[2, 3, 5, 5], r), rand_tensor(&[2, 3, 3, 3], r), rand_tensor(&[2], r)],
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 1)?;
                weighted(g, y, 1)
            },
        ),
        op_case(
            "conv2d 7x7",
            |r| vec![rand_tensor(&[2, 4, 4], r), rand_tensor(&[1, 2, 7, 7], r), rand_tensor(&[1], r)],
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 3)?;
                weighted(g, y, 2)
            },
        ),
    ];
    for (mode, gname, cname) in [
        (PoolMode::Max, "global max pool", "channel max pool"),
        (PoolMode::Avg, "global avg pool", "channel avg pool"),
    ] {
        cases.push(op_case(gname, |r| vec![spaced_tensor(&[2, 3, 3, 4], r)], move |g, v| {
            let y = g.global_pool(v[0], mode)?;
            weighted(g, y, 3)
        }));
        cases.push(op_case(cname, |r| vec![spaced_tensor(&[2, 4, 3, 3], r)], move |g, v| {
            let y = g.channel_pool(v[0], mode)?;
            weighted(g, y, 4)
        }));
    }
    cases.extend([
        op_case("max_pool2", |r| vec![spaced_tensor(&[2, 2, 4, 5], r)], |g, v| {
            let y = g.max_pool2(v[0])?;
            weighted(g, y, 5)
        }),
        op_case("add/sub/mul", |r| vec![rand_tensor(&[3, 4], r), rand_tensor(&[3, 4], r)], |g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(v[0], v[1])?;
            let m = g.mul(a, s)?;
            weighted(g, m, 6)
        }),
        op_case(
            "broadcast_mul",
            |r| vec![rand_tensor(&[2, 3, 4, 4], r), rand_tensor(&[2, 3, 1, 1], r), rand_tensor(&[2, 1, 4, 4], r)],
            |g, v| {
                let a = g.broadcast_mul(v[0], v[1])?;
                let b = g.broadcast_mul(a, v[2])?;
                weighted(g, b, 7)
            },
        ),
        op_case("sigmoid/exp/log/softplus", |r| vec![rand_tensor(&[10], r)], |g, v| {
            let s = g.sigmoid(v[0]);
            let e = g.exp(v[0]);
            let sp = g.softplus(v[0]);
            let l = g.log(s);
            let sc = g.scale(e, 0.7);
            let n = g.neg(sp);
            let a = g.add(l, sc)?;
            let b = g.add(a, n)?;
            weighted(g, b, 8)
        }),
        op_case("relu/abs/smooth_l1", |r| vec![away_from_kinks(12, r)], |g, v| {
            let a = g.abs(v[0]);
            let s = g.smooth_l1(v[0]);
            let r = g.relu(v[0]);
            let x = g.add(a, s)?;
            let y = g.add(x, r)?;
            weighted(g, y, 9)
        }),
        op_case(
            "concat/slice/gather/reshape",
            |r| vec![rand_tensor(&[3, 4], r), rand_tensor(&[3, 2], r), rand_tensor(&[2, 3, 2, 2], r), rand_tensor(&[2, 1, 2, 2], r)],
            |g, v| {
                let c = g.concat(v[0], v[1], 1)?;
                let s = g.slice_cols(c, 1, 4)?;
                let gth = g.gather(s, &[2, 0, 2])?;
                let rs = g.reshape(gth, &[12])?;
                let cc = g.concat_channels(v[2], v[3])?;
                let fl = g.flatten_rows(cc)?;
                let a = weighted(g, rs, 10)?;
                let b = weighted(g, fl, 18)?;
                g.add(a, b)
            },
        ),
        op_case("broadcast_spatial", |r| vec![rand_tensor(&[2, 3], r)], |g, v| {
            let y = g.broadcast_spatial(v[0], 2, 3)?;
            weighted(g, y, 11)
        }),
        op_case(
            "batch_norm",
            |r| vec![rand_tensor(&[3, 2, 2, 3], r), rand_tensor(&[2], r), rand_tensor(&[2], r)],
            |g, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], None, 1e-5)?;
                weighted(g, y, 12)
            },
        ),
        op_case("log_softmax", |r| vec![rand_tensor(&[3, 5], r)], |g, v| {
            let y = g.log_softmax(v[0])?;
            weighted(g, y, 13)
        }),
        op_case(
            "matmul/sq_dist/cosine",
            |r| vec![rand_tensor(&[3, 4], r), rand_tensor(&[4, 2], r), rand_tensor(&[5, 4], r)],
            |g, v| {
                let m = g.matmul(v[0], v[1])?;
                let d = g.sq_dist(v[0], v[2])?;
                let c = g.cosine(v[0], v[2])?;
                let a = weighted(g, m, 14)?;
                let b = weighted(g, d, 15)?;
                let e = weighted(g, c, 16)?;
                let ab = g.add(a, b)?;
                g.add(ab, e)
            },
        ),
        op_case("nll_sum/sum/mean", |r| vec![rand_tensor(&[4, 3], r)], |g, v| {
            let lp = g.log_softmax(v[0])?;
            let l = g.nll_sum(lp, &[0, 2, 1, 2])?;
            let sq = g.mul(v[0], v[0])?;
            let m = g.mean(sq);
            g.add(l, m)
        }),
        op_case("normalize_rows", |r| vec![rand_tensor(&[3, 2, 2], r)], |g, v| {
            let y = g.normalize_rows(v[0], 3)?;
            weighted(g, y, 17)
        }),
    ]);
    cases
}

fn attention_cases() -> Vec<Case> {
    let cfg = AgamConfig { reduction: 2, spatial_kernel: 3, ..AgamConfig::new(4, 3) };
    let module = |order_swap: bool| {
        let cfg = cfg.clone();
        move |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cfg = cfg.clone();
            if order_swap {
                cfg.order = agam_core::agam::AttentionOrder::SpatialFirst;
            }
            let ag = BranchParams::init(&cfg, Branch::AttributesGuided, &mut rng);
            let sg = BranchParams::init(&cfg, Branch::SelfGuided, &mut rng);
            let mut inputs = vec![rand_tensor(&[2, 4, 3, 3], &mut rng), rand_tensor(&[2, 3], &mut rng)];
            for p in [&ag, &sg] {
                inputs.extend([&p.cw0_w, &p.cw0_b, &p.cw1_w, &p.cw1_b, &p.sconv_w, &p.sconv_b].map(|t| t.clone()));
            }
            let cfg2 = cfg.clone();
            finite_diff_check(
                move |g, v| {
                    let bv = |b, o: usize| BranchVars {
                        branch: b,
                        cw0_w: v[o],
                        cw0_b: v[o + 1],
                        cw1_w: v[o + 2],
                        cw1_b: v[o + 3],
                        sconv_w: v[o + 4],
                        sconv_b: v[o + 5],
                    };
                    let (agv, sgv) = (bv(Branch::AttributesGuided, 2), bv(Branch::SelfGuided, 8));
                    let r = agam_forward(g, &agv, &sgv, &cfg2, v[0], Some(v[1]), true)?;
                    let a = weighted(g, r.ag.expect("ag").refined, 21)?;
                    let s = weighted(g, r.sg.expect("sg").refined, 22)?;
                    g.add(a, s)
                },
                &inputs,
                DEFAULT_EPS,
            )
        }
    };
    vec![
        Case::new("attention module CA-SA", module(false)),
        Case::new("attention module SA-CA", module(true)),
    ]
}

fn loss_cases() -> Vec<Case> {
    let labels = [0usize, 0, 1, 1, 2, 2];
    vec![
        op_case("soft-margin alignment", |r| vec![rand_tensor(&[3, 4], r), rand_tensor(&[3, 4], r)], |g, v| {
            let a = g.normalize_rows(v[0], 3)?;
            let b = g.normalize_rows(v[1], 3)?;
            soft_margin_alignment(g, a, b)
        }),
        op_case(
            "L1/MSE/smoothL1 alignment",
            |r| vec![rand_tensor(&[8], r).map(|v| 3.0 * v + 0.05), rand_tensor(&[8], r)],
            |g, v| {
                // Keep differences off the L1 and smooth-L1 kinks.
                let mut total = None;
                for kind in [AlignmentLoss::L1, AlignmentLoss::Mse, AlignmentLoss::SmoothL1] {
                    let l = alt_alignment(g, kind, v[0], v[1])?;
                    total = Some(match total {
                        None => l,
                        Some(t) => g.add(t, l)?,
                    });
                }
                Ok(total.expect("three losses"))
            },
        ),
        op_case("prototypical loss", |r| vec![rand_tensor(&[6, 5], r), rand_tensor(&[4, 5], r)], move |g, v| {
            let p = prototypes(g, v[0], &labels, 3)?;
            let lp = protonet_logp(g, v[1], p)?;
            metric_classification_loss(g, lp, &[0, 1, 2, 1], Reduction::Sum)
        }),
        op_case("matching loss", |r| vec![rand_tensor(&[6, 5], r), rand_tensor(&[4, 5], r)], move |g, v| {
            let lp = matchingnet_logp(g, v[1], v[0], &labels, 3)?;
            metric_classification_loss(g, lp, &[0, 1, 2, 1], Reduction::Mean)
        }),
        Case::new("relation loss", move |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Zero biases put a unit exactly on its ReLU kink whenever its
            // inputs die, and near-zero factors leave gradients below what
            // central differences resolve.
            let mut p = RelationParams::init(2, 2, 2, 3, &mut rng);
            for w in [&mut p.conv_w, &mut p.fc1_w, &mut p.fc2_w] {
                *w = away_from_zero(w.shape(), 0.2, 1.0, &mut rng);
            }
            for b in [&mut p.conv_b, &mut p.fc1_b, &mut p.fc2_b] {
                *b = away_from_zero(b.shape(), 0.1, 0.5, &mut rng);
            }
            let inputs = vec![
                away_from_zero(&[6, 2, 2, 2], 0.2, 1.0, &mut rng),
                away_from_zero(&[3, 2, 2, 2], 0.2, 1.0, &mut rng),
                p.conv_w,
                p.conv_b,
                p.fc1_w,
                p.fc1_b,
                p.fc2_w,
                p.fc2_b,
            ];
            finite_diff_check(
                move |g, v| {
                    let rv = RelationVars {
                        conv_w: v[2],
                        conv_b: v[3],
                        fc1_w: v[4],
                        fc1_b: v[5],
                        fc2_w: v[6],
                        fc2_b: v[7],
                    };
                    let cm = class_mean_maps(g, v[0], &labels, 3)?;
                    let s = relationnet_scores(g, &rv, v[1], cm)?;
                    relation_mse_loss(g, s, &[0, 2, 1], Reduction::Sum)
                },
                &inputs,
                DEFAULT_EPS,
            )
        }),
    ]
}

/// Small model and dataset used by the composed-loss row.
pub fn composed_fixture(seed: u64) -> Result<(Model, Episode)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        backbone: BackboneConfig::conv4(4, [3, 8, 8], [true, true, false, false]),
        attribute_dim: 4,
        reduction: 2,
        spatial_kernel: 3,
        ..ModelConfig::default()
    };
    let mut model = Model::new(&config, &AblationFlags::default(), &mut rng)?;
    // Non-trivial affine and running statistics.
    for (name, t) in model.params.iter_mut() {
        if name.ends_with("gamma") || name.ends_with("beta") {
            *t = Tensor::from_fn(t.shape(), |_| rng.gen_range(0.5..1.5));
        }
    }
    let classes = (0..3)
        .map(|c| Class {
            id: c,
            samples: (0..2)
                .map(|_| Sample {
                    image: rand_tensor(&[3, 8, 8], &mut rng),
                    attributes: Tensor::from_fn(&[4], |_| rng.gen_range(0.0..1.0)),
                })
                .collect(),
        })
        .collect();
    let ds = Dataset {
        name: "gradcheck".into(),
        attribute_dim: 4,
        image_shape: [3, 8, 8],
        classes,
        splits: Splits { seen: vec![0, 1, 2], ..Default::default() },
    };
    let ep = Episode::from_ids(&ds, vec![0, 1, 2], vec![(0, 0), (1, 0), (2, 0)], vec![(0, 1), (1, 1), (2, 1)])?;
    Ok((model, ep))
}

/// Gradient of the full episode loss `L_mbc + α·L_cas + β·L_sas` with
/// respect to every model parameter, checked on `per_tensor` random
/// elements of each tensor. The teacher is not detached here: with the stop
/// gradient, the recorded gradient is not the derivative of the loss value.
pub fn composed_loss_check(seed: u64, per_tensor: usize) -> Result<GradCheck> {
    let (mut model, ep) = composed_fixture(seed)?;
    let align = AlignmentConfig {
        alpha: 1.0,
        beta: 0.1,
        teacher_stop_gradient: false,
        ..AlignmentConfig::default()
    };
    let analytic = run_episode(&model, &ep, &align, Reduction::Sum, ForwardMode::TRAIN)?
        .grads
        .expect("training mode yields gradients");
    let loss = |m: &Model| -> Result<f64> {
        let mut g = Graph::new();
        let bound = m.bind(&mut g);
        let eg = build_episode_graph(&mut g, m, &bound, &ep, &align, Reduction::Sum, ForwardMode::TRAIN)?;
        Ok(g.value(eg.loss).item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let mut report = GradCheck { max_rel_error: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0 };
    let names: Vec<String> = model.params.names().map(String::from).collect();
    for (ti, name) in names.iter().enumerate() {
        let len = model.params.get(name)?.len();
        for _ in 0..per_tensor.min(len) {
            let i = rng.gen_range(0..len);
            let orig = model.params.get(name)?.data()[i];
            let mut at = |v: f64| -> Result<f64> {
                model.params.get_mut(name).expect("named").data_mut()[i] = v;
                loss(&model)
            };
            let (hi, lo) = (at(orig + DEFAULT_EPS)?, at(orig - DEFAULT_EPS)?);
            let numeric = (hi - lo) / (2.0 * DEFAULT_EPS);
            at(orig)?;
            let a = analytic[name].data()[i];
            // A conv bias feeding a training-mode batch norm leaves the loss
            // unchanged; central differences then only see rounding.
            let rounding = 4.0 * f64::EPSILON * hi.abs().max(lo.abs()) / (2.0 * DEFAULT_EPS);
            let inert = a.abs() < 1e-12 && numeric.abs() <= rounding;
            let e = if inert { 0.0 } else { relative_error(a, numeric) };
            if e > report.max_rel_error {
                report = GradCheck { max_rel_error: e, worst: (ti, i), analytic: a, numeric };
            }
        }
    }
    Ok(report)
}

/// Every operation row plus the composed loss.
pub fn standard_cases() -> Vec<Case> {
    let mut cases = op_cases();
    cases.extend(attention_cases());
    cases.extend(loss_cases());
    cases.push(Case::new("full episode loss", |seed| composed_loss_check(seed, 6)));
    cases
}

/// A squaring operation whose backward omits the factor 2.
pub fn broken_fixture() -> Case {
    op_case("broken square (fixture)", |r| vec![rand_tensor(&[5], r)], |g, v| {
        let x = g.value(v[0]).clone();
        let y = x.map(|a| a * a);
        let sq = g.custom(
            &[v[0]],
            y,
            Box::new(|ins, _out, gout| vec![Tensor::from_fn(ins[0].shape(), |i| ins[0].data()[i] * gout.data()[i])]),
        );
        Ok(g.sum(sq))
    })
}

/// Runs every case over seeds `first_seed..first_seed + seeds`.
pub fn run_suite(cases: &[Case], first_seed: u64, seeds: u64) -> Vec<Row> {
    cases
        .iter()
        .map(|c| {
            let mut row = Row { name: c.name, max_rel_error: 0.0, worst_seed: first_seed, error: None };
            for seed in first_seed..first_seed + seeds {
                match (c.run)(seed) {
                    Ok(r) if r.max_rel_error > row.max_rel_error || r.max_rel_error.is_nan() => {
                        row.max_rel_error = if r.max_rel_error.is_nan() { f64::INFINITY } else { r.max_rel_error };
                        row.worst_seed = seed;
                    }
                    Ok(_) => {}
                    Err(e) => {
                        row.error = Some(e.to_string());
                        row.max_rel_error = f64::INFINITY;
                        row.worst_seed = seed;
                        break;
                    }
                }
            }
            row
        })
        .collect()
}

/// Two significant digits.
pub fn format_error(e: f64) -> String {
    if e.is_finite() {
        format!("{e:.1e}")
    } else {
        "inf".into()
    }
}

pub fn format_table(rows: &[Row]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(9);
    let mut s = format!("{:<width$}  {:>9}  {:>4}  result\n", "operation", "max_rel", "seed");
    for r in rows {
        let _ = write!(
            s,
            "{:<width$}  {:>9}  {:>4}  {}",
            r.name,
            format_error(r.max_rel_error),
            r.worst_seed,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if let Some(e) = &r.error {
            let _ = write!(s, " ({e})");
        }
        s.push('\n');
    }
    s
}
