//! Every differentiable op plus the full encoder, as finite-difference cases.

use rand::Rng;
use spkcon_core::encoder::{EncoderConfig, EncoderParams, Mode};
use spkcon_core::numerics::{SeqLayout, Tape, Tensor, Var};

use super::{gradient_error, rand_tensor, rng};

pub const SEEDS: u64 = 20;
pub const STEP: f64 = 1e-4;
pub const ELEMENTWISE_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;

type Inputs = Box<dyn Fn(u64) -> Vec<Tensor<f64>>>;
type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>;

pub struct GradCase {
    pub group: &'static str,
    pub name: &'static str,
    pub tol: f64,
    pub step: f64,
    pub inputs: Inputs,
    pub build: Build,
}

impl GradCase {
    /// Worst relative error over all seeds.
    pub fn worst(&self) -> f64 {
        (0..SEEDS)
            .map(|s| gradient_error(&(self.inputs)(s), s, self.step, &self.build))
            .fold(0.0, f64::max)
    }
}

fn mats(seed: u64, shapes: &[&[usize]]) -> Vec<Tensor<f64>> {
    let mut r = rng(seed);
    shapes.iter().map(|s| rand_tensor(&mut r, s, 0.1, 1.0)).collect()
}

fn shapes(shapes: &'static [&'static [usize]]) -> Inputs {
    Box::new(move |s| mats(s, shapes))
}

fn case(
    group: &'static str,
    name: &'static str,
    tol: f64,
    inputs: Inputs,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var + 'static,
) -> GradCase {
    GradCase {
        group,
        name,
        tol,
        step: STEP,
        inputs,
        build: Box::new(build),
    }
}

fn small_encoder() -> EncoderParams<f64> {
    let cfg = EncoderConfig {
        input_dim: 6,
        channels: [8, 8, 8, 8, 8],
        embed_dim: 6,
        proj_dim: 5,
    };
    let p = EncoderParams::<f64>::init(cfg, 3);
    // Non-trivial running statistics so eval mode is exercised properly.
    let named: Vec<_> = p
        .named()
        .into_iter()
        .map(|(n, t)| {
            if n.ends_with("running_var") {
                (n, t.map(|v| v * 1.7 + 0.2))
            } else if n.ends_with("running_mean") {
                (n, t.map(|v| v + 0.3))
            } else {
                (n, t)
            }
        })
        .collect();
    EncoderParams::from_named(p.config().clone(), &named).unwrap()
}

pub fn cases() -> Vec<GradCase> {
    const E: f64 = ELEMENTWISE_TOL;
    const C: f64 = COMPOSITE_TOL;
    let mut out = vec![
        case("elementwise", "add", E, shapes(&[&[3, 4], &[3, 4]]), |t, v| t.add(v[0], v[1]).unwrap()),
        case("elementwise", "sub", E, shapes(&[&[3, 4], &[3, 4]]), |t, v| t.sub(v[0], v[1]).unwrap()),
        case("elementwise", "mul", E, shapes(&[&[3, 4], &[3, 4]]), |t, v| t.mul(v[0], v[1]).unwrap()),
        case("elementwise", "scale", E, shapes(&[&[5, 3]]), |t, v| t.scale(v[0], -1.7)),
        case("elementwise", "relu", E, shapes(&[&[5, 3]]), |t, v| t.relu(v[0])),
        case("elementwise", "exp", E, shapes(&[&[5, 3]]), |t, v| t.exp(v[0])),
        case("elementwise", "log", E, shapes(&[&[5, 3]]), |t, v| {
            let e = t.exp(v[0]);
            t.log(e)
        }),
        case("elementwise", "sum", E, shapes(&[&[5, 3]]), |t, v| t.sum(v[0])),
        case("elementwise", "mean", E, shapes(&[&[5, 3]]), |t, v| t.mean(v[0])),
        case("matrix", "matmul", E, shapes(&[&[4, 3], &[3, 5]]), |t, v| t.matmul(v[0], v[1]).unwrap()),
        case("matrix", "matmul_nt", E, shapes(&[&[4, 3], &[6, 3]]), |t, v| {
            t.matmul_nt(v[0], v[1]).unwrap()
        }),
        case("matrix", "add_row", E, shapes(&[&[4, 3], &[3]]), |t, v| t.add_row(v[0], v[1]).unwrap()),
        case("matrix", "row_dot", E, shapes(&[&[4, 3], &[4, 3]]), |t, v| t.row_dot(v[0], v[1]).unwrap()),
        case("matrix", "concat_rows", E, shapes(&[&[2, 3], &[4, 3]]), |t, v| {
            t.concat_rows(&[v[0], v[1]]).unwrap()
        }),
        case("matrix", "gather_rows", E, shapes(&[&[4, 3]]), |t, v| {
            t.gather_rows(v[0], &[2, 0, 2, 3]).unwrap()
        }),
        case("matrix", "concat_cols", E, shapes(&[&[3, 2], &[3, 4]]), |t, v| {
            t.concat_cols(&[v[0], v[1]]).unwrap()
        }),
        case("matrix", "softmax", E, shapes(&[&[3, 5]]), |t, v| t.softmax(v[0]).unwrap()),
        case("matrix", "log_softmax", E, shapes(&[&[3, 5]]), |t, v| t.log_softmax(v[0]).unwrap()),
        case("normalization", "l2_normalize", C, shapes(&[&[4, 6]]), |t, v| t.l2_normalize(v[0]).unwrap()),
        case("normalization", "l2_normalize+dot", C, shapes(&[&[4, 6], &[4, 6]]), |t, v| {
            let a = t.l2_normalize(v[0]).unwrap();
            let b = t.l2_normalize(v[1]).unwrap();
            t.row_dot(a, b).unwrap()
        }),
        case("normalization", "batch_norm", C, shapes(&[&[8, 3], &[3], &[3]]), |t, v| {
            t.batch_norm(v[0], v[1], v[2]).unwrap().0
        }),
        case("normalization", "frozen_norm", E, shapes(&[&[5, 3], &[3], &[3]]), |t, v| {
            t.frozen_norm(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0]).unwrap()
        }),
        case("contrastive", "contrastive_nll", E, shapes(&[&[3, 5]]), |t, v| {
            let mask = [
                true, true, false, true, true, //
                true, true, true, true, true, //
                false, true, true, true, false,
            ];
            let weights = [
                1.0, 0.0, 0.0, 0.0, 0.0, //
                0.0, 0.5, 0.0, 0.5, 0.0, //
                0.0, 0.0, 0.0, 1.0, 0.0,
            ];
            t.contrastive_nll(v[0], &mask, &weights).unwrap()
        }),
        case("contrastive", "gather_dots", E, shapes(&[&[3, 4]]), |t, v| {
            let table = Tensor::new(vec![3, 4], (0..12).map(|k| (k as f64 * 0.37).sin()).collect()).unwrap();
            t.gather_dots(v[0], table, vec![0, 2, 2, 1, 0, 1], vec![1.0, 2.0, 0.5, -1.0, 3.0, 1.5], 2)
                .unwrap()
        }),
    ];

    let layout = SeqLayout::from_lengths(&[9, 12, 7]);
    let rows = layout.total_rows();
    for (kernel, dilation) in [(5, 1), (3, 2), (3, 3), (1, 1)] {
        let l = layout.clone();
        out.push(case(
            "sequence",
            "conv1d",
            E,
            Box::new(move |s| mats(s, &[&[rows, 3], &[kernel * 3, 4], &[4]])),
            move |t, v| t.conv1d(v[0], v[1], v[2], &l, kernel, dilation).unwrap().0,
        ));
    }
    let l = layout.clone();
    out.push(case(
        "sequence",
        "stats_pool",
        C,
        Box::new(move |s| mats(s, &[&[rows, 4]])),
        move |t, v| t.stats_pool(v[0], &l).unwrap(),
    ));

    let layout = SeqLayout::from_lengths(&[18, 22, 16, 20]);
    let rows = layout.total_rows();
    let base = small_encoder();
    for (mode, name) in [(Mode::Train, "encoder(train)"), (Mode::Eval, "encoder(eval)")] {
        let (p, q) = (base.clone(), base.clone());
        let l = layout.clone();
        out.push(GradCase {
            group: "encoder",
            name,
            tol: C,
            // Thousands of ReLU units: a smaller step keeps the central
            // difference from straddling a kink.
            step: 1e-6,
            inputs: Box::new(move |s| {
                let mut r = rng(s);
                let mut inputs = vec![rand_tensor(&mut r, &[rows, 6], 0.1, 1.0)];
                for t in EncoderParams::<f64>::init(q.config().clone(), s).tensors() {
                    let mut t = t.clone();
                    for v in t.data_mut() {
                        *v += 0.05 * r.random_range(-1.0..1.0f64);
                    }
                    inputs.push(t);
                }
                inputs
            }),
            build: Box::new(move |t, v| {
                let out = p.forward(t, &v[1..], v[0], &l, mode).unwrap();
                t.concat_cols(&[out.embedding, out.projection]).unwrap()
            }),
        });
    }
    out
}
