//! Checks shared by the per-module tests and the acceptance run. Each returns
//! a one-line summary on success and the first violation on failure.

use std::collections::VecDeque;
use std::time::Instant;

use rand::Rng;
use spkcon_core::augment::{add_reverb, NoiseClass, NoiseDraw, WavAugConfig, WavAugDraw, AugmentCorpus};
use spkcon_core::contrastive::{LossKind, moco_loss, semi_loss, simclr_loss, supcon_loss, LossConfig, NegativeQueue};
use spkcon_core::encoder::{ema_update, EncoderConfig, EncoderParams};
use spkcon_core::eval::{eer, min_dcf, DcfConfig};
use spkcon_core::frontend::Waveform;
use spkcon_core::numerics::{Tape, Tensor};
use spkcon_core::prototypes::{concentration, joint_loss, kmeans, protonce_with_negatives, sample_negatives, PrototypeBank};

use super::gradcases::cases;
use super::toy::tiny_config;
use super::oracles::{self, Rows};
use super::{rand_unit_rows, rng};

pub type Outcome = Result<String, String>;

fn rows(t: &Tensor<f64>) -> Rows {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0, "");
    let all = cases();
    for c in &all {
        let err = c.worst();
        ensure(err < c.tol, || format!("{}: relative error {err:.3e} over tolerance {:e}", c.name, c.tol))?;
        if err / c.tol > worst.0 {
            worst = (err / c.tol, c.name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("gradient checks took {secs:.1}s"))?;
    Ok(format!(
        "{} cases x 20 seeds in {secs:.1}s, worst {:.2} of tolerance ({})",
        all.len(),
        worst.0,
        worst.1
    ))
}

/// A random instance: queries, keys (both unit rows), a queue and a bank.
pub struct Instance {
    pub q: Tensor<f64>,
    pub k: Tensor<f64>,
    pub queue: Tensor<f64>,
    pub bank: PrototypeBank,
    pub labels: Vec<usize>,
    pub protos: Vec<usize>,
    pub negatives: Vec<Vec<usize>>,
    pub partial: Vec<Option<usize>>,
    pub tau: f64,
}

pub fn instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let n = r.random_range(1..=16);
    let d = r.random_range(2..=12);
    let kq = r.random_range(0..=64);
    let m = r.random_range(2..=8);
    let q = rand_unit_rows(&mut r, n, d);
    let k = rand_unit_rows(&mut r, n, d);
    let queue = rand_unit_rows(&mut r, kq, d);
    let centroids: Tensor<f32> = rand_unit_rows(&mut r, m, d).cast();
    let phi: Vec<f32> = (0..m).map(|_| r.random_range(0.05..0.5)).collect();
    let classes = r.random_range(1..=n);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
    let protos: Vec<usize> = (0..n).map(|_| r.random_range(0..m)).collect();
    let width = r.random_range(1..=2 * m);
    let negatives = protos
        .iter()
        .map(|&s| sample_negatives(s, m, width, &mut r).unwrap())
        .collect();
    let partial = labels
        .iter()
        .map(|&l| r.random_bool(0.5).then_some(l))
        .collect();
    let bank = PrototypeBank {
        centroids,
        phi,
        assignments: Vec::new(),
        sizes: vec![0; m],
        epoch: 0,
    };
    Instance {
        q,
        k,
        queue,
        bank,
        labels,
        protos,
        negatives,
        partial,
        tau: r.random_range(0.05..0.5),
    }
}

impl Instance {
    fn centroids(&self) -> (Rows, Vec<f64>) {
        let c = self.bank.centroids.cast::<f64>();
        (rows(&c), self.bank.phi.iter().map(|&p| p as f64).collect())
    }
}

/// Every loss of the crate against the naive oracle, returning the largest
/// absolute difference per loss.
pub fn loss_diffs(inst: &Instance) -> [(&'static str, f64); 6] {
    let cfg = LossConfig {
        tau: inst.tau,
        lambda: 2.5,
        alpha: 0.7,
    };
    let (q, k, queue) = (rows(&inst.q), rows(&inst.k), rows(&inst.queue));
    let (cent, phi) = inst.centroids();
    let mut tape = Tape::<f64>::new();
    let qv = tape.constant(inst.q.clone());
    let kv = tape.constant(inst.k.clone());
    let mut out = [("", 0.0); 6];

    let l = simclr_loss(&mut tape, qv, kv, inst.tau).unwrap();
    out[0] = ("simclr", (tape_value(&tape, l) - oracles::simclr(&q, &k, inst.tau)).abs());
    let sup: Vec<Option<usize>> = inst.labels.iter().copied().map(Some).collect();
    let l = supcon_loss(&mut tape, qv, kv, &sup, inst.tau).unwrap();
    out[1] = ("supcon", (tape_value(&tape, l) - oracles::supcon(&q, &k, &inst.labels, inst.tau)).abs());
    let l = moco_loss(&mut tape, qv, &inst.k, &inst.queue, inst.tau).unwrap();
    out[2] = ("moco", (tape_value(&tape, l) - oracles::moco(&q, &k, &queue, inst.tau)).abs());
    let l = protonce_with_negatives(&mut tape, qv, &inst.bank, &inst.protos, &inst.negatives).unwrap();
    out[3] = (
        "protonce",
        (tape_value(&tape, l) - oracles::protonce(&q, &cent, &phi, &inst.protos, &inst.negatives)).abs(),
    );
    let (l, _) = joint_loss(&mut tape, qv, &inst.k, &inst.queue, &inst.bank, &inst.protos, &inst.negatives, &cfg).unwrap();
    let want = oracles::joint(&q, &k, &queue, &cent, &phi, &inst.protos, &inst.negatives, cfg.tau, cfg.alpha);
    out[4] = ("joint", (tape_value(&tape, l) - want).abs());
    let l = semi_loss(&mut tape, qv, &inst.k, &inst.partial, &inst.queue, &cfg).unwrap();
    let want = oracles::semi(&q, &k, &inst.partial, &queue, cfg.tau, cfg.lambda);
    out[5] = ("semi", (tape_value(&tape, l) - want).abs());
    out
}

fn tape_value(tape: &Tape<f64>, v: spkcon_core::numerics::Var) -> f64 {
    tape.value(v).item().unwrap()
}

pub fn loss_oracles() -> Outcome {
    let mut worst = [0.0f64; 6];
    let mut names = [""; 6];
    for seed in 0..100 {
        for (j, (name, diff)) in loss_diffs(&instance(seed)).into_iter().enumerate() {
            names[j] = name;
            ensure(diff <= 1e-6, || format!("{name} differs by {diff:.3e} on instance {seed}"))?;
            worst[j] = worst[j].max(diff);
        }
    }
    let parts: Vec<String> = names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.1e}")).collect();
    Ok(format!("100 instances, max |diff|: {}", parts.join(", ")))
}

/// Largest deviation from each structural identity over 100 instances.
pub fn reductions() -> Outcome {
    let mut worst = [0.0f64; 4];
    for seed in 0..100 {
        let inst = instance(seed);
        let n = inst.q.rows();
        let mut tape = Tape::<f64>::new();
        let qv = tape.constant(inst.q.clone());
        let kv = tape.constant(inst.k.clone());

        let distinct: Vec<Option<usize>> = (0..n).map(|i| Some(7 * i + 3)).collect();
        let a = supcon_loss(&mut tape, qv, kv, &distinct, inst.tau).unwrap();
        let b = simclr_loss(&mut tape, qv, kv, inst.tau).unwrap();
        worst[0] = worst[0].max((tape_value(&tape, a) - tape_value(&tape, b)).abs());

        let cfg = LossConfig {
            tau: inst.tau,
            lambda: 3.0,
            alpha: 0.0,
        };
        let moco = moco_loss(&mut tape, qv, &inst.k, &inst.queue, inst.tau).unwrap();
        let moco = tape_value(&tape, moco);
        let (j, _) = joint_loss(&mut tape, qv, &inst.k, &inst.queue, &inst.bank, &inst.protos, &inst.negatives, &cfg).unwrap();
        worst[1] = worst[1].max((tape_value(&tape, j) - moco).abs());

        let none = vec![None; n];
        let s = semi_loss(&mut tape, qv, &inst.k, &none, &inst.queue, &cfg).unwrap();
        worst[2] = worst[2].max((tape_value(&tape, s) - cfg.lambda * moco).abs());

        let q1 = tape.constant(Tensor::new(vec![1, inst.q.cols()], inst.q.row(0).to_vec()).unwrap());
        let k1 = tape.constant(Tensor::new(vec![1, inst.k.cols()], inst.k.row(0).to_vec()).unwrap());
        let one = simclr_loss(&mut tape, q1, k1, inst.tau).unwrap();
        worst[3] = worst[3].max(tape_value(&tape, one).abs());
    }
    let names = ["supcon(distinct)=simclr", "joint(a=0)=moco", "semi(unlabeled)=l*moco", "simclr(N=1)=0"];
    for (n, w) in names.iter().zip(worst) {
        ensure(w <= 1e-12, || format!("{n}: deviation {w:.3e}"))?;
    }
    Ok(format!("{}, max deviation {:.1e}", names.join(", "), worst.iter().fold(0.0f64, |a, &b| a.max(b))))
}

/// 1000 pushes of random batch sizes against a plain FIFO model.
pub fn queue_contract() -> Outcome {
    let mut r = rng(41);
    let (cap, dim) = (37, 5);
    let mut q = NegativeQueue::new(cap, dim).map_err(|e| e.to_string())?;
    let mut model: VecDeque<Vec<f32>> = VecDeque::new();
    for push in 0..1000 {
        let n = r.random_range(1..=50);
        let keys: Tensor<f32> = rand_unit_rows(&mut r, n, dim).cast();
        if r.random_bool(0.05) {
            let mut bad = keys.clone();
            bad.row_mut(n - 1).iter_mut().for_each(|v| *v *= 1.01);
            let before = q.clone();
            ensure(q.push(&bad).is_err(), || format!("push {push}: non-unit key accepted"))?;
            ensure(q == before, || format!("push {push}: rejected batch modified the queue"))?;
        }
        q.push(&keys).map_err(|e| e.to_string())?;
        for i in 0..n {
            model.push_back(keys.row(i).to_vec());
            if model.len() > cap {
                model.pop_front();
            }
        }
        let snap = q.snapshot();
        ensure(q.len() == model.len() && q.len() <= cap, || format!("push {push}: length {}", q.len()))?;
        for (i, want) in model.iter().enumerate() {
            ensure(snap.row(i) == want.as_slice(), || format!("push {push}: slot {i} out of FIFO order"))?;
            let norm = snap.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
            ensure((norm - 1.0).abs() <= 1e-5, || format!("push {push}: slot {i} has norm {norm}"))?;
        }
    }
    Ok(format!("1000 pushes into capacity {cap}: FIFO order, capacity and unit norm hold"))
}

/// One EMA update against the closed form evaluated in f64.
pub fn ema_closed_form() -> Outcome {
    let cfg = EncoderConfig {
        input_dim: 6,
        channels: [8, 8, 8, 8, 12],
        embed_dim: 6,
        proj_dim: 5,
    };
    let mut worst = 0.0f64;
    for (seed, m) in [(1, 0.0), (2, 0.5), (3, 0.9), (4, 0.999), (5, 1.0)] {
        let mut key = EncoderParams::<f32>::init(cfg.clone(), seed);
        let query = EncoderParams::<f32>::init(cfg.clone(), seed + 100);
        let before = key.clone();
        ema_update(&mut key, &query, m).map_err(|e| e.to_string())?;
        for ((k, k0), q) in key.tensors().iter().zip(before.tensors()).zip(query.tensors()) {
            for ((&kv, &k0v), &qv) in k.data().iter().zip(k0.data()).zip(q.data()) {
                let want = (m * k0v as f64 + (1.0 - m) * qv as f64) as f32;
                worst = worst.max((kv as f64 - want as f64).abs());
            }
        }
    }
    ensure(worst <= 1e-12, || format!("EMA deviates from the closed form by {worst:.3e}"))?;
    Ok(format!("5 momenta, max deviation {worst:.1e}"))
}

/// Whole-batch epochs, so each epoch is one step: afterwards the key encoder
/// must equal the EMA of its previous state and the updated query, i.e. no
/// gradient reached it.
pub fn key_encoder_frozen() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = tiny_config(dir.path(), LossKind::Moco);
    cfg.batch_size = 16;
    cfg.ema_momentum = 0.7;
    let mut t = spkcon_core::harness::Trainer::new(cfg).map_err(|e| e.to_string())?;
    ensure(t.steps_per_epoch() == 1, || "expected one step per epoch".into())?;
    let mut checked = 0;
    for step in 0..3 {
        let before = t.key().clone();
        t.train_epoch().map_err(|e| e.to_string())?;
        for ((k, k0), q) in t.key().tensors().iter().zip(before.tensors()).zip(t.query().tensors()) {
            for ((&kv, &k0v), &qv) in k.data().iter().zip(k0.data()).zip(q.data()) {
                let want = (0.7 * k0v as f64 + (1.0 - 0.7) * qv as f64) as f32;
                ensure(kv == want, || format!("step {step}: key weight {kv} != EMA {want}"))?;
                checked += 1;
            }
        }
    }
    ensure(t.key().tensors() != t.query().tensors(), || "query never moved".into())?;
    Ok(format!("{checked} key weights over 3 steps equal the EMA closed form"))
}

pub fn hand_metric_case() -> Outcome {
    let scores = [0.6, 0.4, 0.8, 0.5, 0.3, 0.2];
    let targets = [true, true, true, false, false, false];
    let (e, _) = eer(&scores, &targets).map_err(|e| e.to_string())?;
    ensure((e - 1.0 / 3.0).abs() < 1e-12, || format!("hand case EER {e}, expected 1/3"))?;
    Ok("hand case EER = 1/3".into())
}

fn random_list<R: Rng>(r: &mut R) -> (Vec<f64>, Vec<bool>) {
    let n = r.random_range(2..=60);
    let mut targets: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
    targets[0] = true;
    targets[1] = false;
    let levels = r.random_range(2..=20) as f64;
    let scores = targets
        .iter()
        .map(|&t| {
            let s: f64 = r.random_range(0.0..1.0) + if t { 0.3 } else { 0.0 };
            // quantized so ties are common
            if r.random_bool(0.5) {
                (s * levels).round() / levels
            } else {
                s
            }
        })
        .collect();
    (scores, targets)
}

pub fn metric_oracle() -> Outcome {
    let mut r = rng(5);
    let dcf = DcfConfig {
        p_target: 0.05,
        c_miss: 1.0,
        c_fa: 1.0,
    };
    let mut worst = 0.0f64;
    for list in 0..1000 {
        let (scores, targets) = random_list(&mut r);
        let (e, _) = eer(&scores, &targets).map_err(|e| e.to_string())?;
        let (d, _) = min_dcf(&scores, &targets, &dcf).map_err(|e| e.to_string())?;
        let (oe, od) = oracles::sweep_metrics(&scores, &targets, dcf.p_target, dcf.c_miss, dcf.c_fa);
        let diff = (e - oe).abs().max((d - od).abs());
        ensure(diff <= 1e-12, || format!("list {list}: eer {e} vs {oe}, minDCF {d} vs {od}"))?;
        worst = worst.max(diff);

        for (name, f) in [
            ("exp", (|x: f64| (3.0 * x).exp()) as fn(f64) -> f64),
            ("affine", |x| 7.0 * x - 2.0),
            ("cube", |x| x * x * x + x),
        ] {
            let mapped: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
            let (e2, _) = eer(&mapped, &targets).map_err(|e| e.to_string())?;
            let (d2, _) = min_dcf(&mapped, &targets, &dcf).map_err(|e| e.to_string())?;
            ensure(e2 == e && d2 == d, || format!("list {list}: metrics changed under {name}"))?;
        }
    }
    Ok(format!("1000 lists match the exhaustive sweep (max diff {worst:.1e}) and are invariant under monotone maps"))
}

fn tone(n: usize, amp: f32) -> Waveform {
    let mut r = rng(9);
    Waveform::new(
        (0..n)
            .map(|i| {
                let t = i as f32 / 16000.0;
                amp * ((2.0 * std::f32::consts::PI * 220.0 * t).sin() + 0.3 * r.random_range(-1.0..1.0f32))
            })
            .collect(),
    )
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

pub fn augmentation() -> Outcome {
    let cfg = WavAugConfig::default();
    let mut r = rng(12);
    let noise = |r: &mut rand_chacha::ChaCha8Rng, n: usize| {
        Waveform::new((0..n).map(|_| r.random_range(-0.5..0.5f32)).collect())
    };
    let corpus = AugmentCorpus {
        rirs: vec![Waveform::new(vec![1.0, 0.0, 0.3])],
        noise: vec![noise(&mut r, 7000)],
        music: vec![noise(&mut r, 9000)],
        babble: vec![noise(&mut r, 11000)],
    };
    let clean = tone(16000, 0.2);
    let mut worst_snr = 0.0f64;
    let mut checked = 0;
    for class in NoiseClass::ALL {
        for &snr in cfg.snr_list(class) {
            let draw = WavAugDraw {
                reverb: None,
                noise: Some(NoiseDraw {
                    class,
                    index: 0,
                    snr_db: snr,
                    offset: r.random_range(0..5000),
                }),
            };
            let out = draw.apply(&clean, &corpus).map_err(|e| e.to_string())?;
            let x: Vec<f64> = clean.samples.iter().map(|&v| v as f64).collect();
            let resid: Vec<f64> = out.samples.iter().zip(&x).map(|(&y, &x)| y as f64 - x).collect();
            let measured = 10.0 * (power(&x) / power(&resid)).log10();
            worst_snr = worst_snr.max((measured - snr).abs());
            ensure((measured - snr).abs() <= 0.1, || format!("{class} at {snr} dB measured {measured:.3} dB"))?;
            checked += 1;
        }
    }

    let mut hits = 0;
    let draws = 10_000;
    for _ in 0..draws {
        if WavAugDraw::sample(&corpus, &cfg, &mut r).map_err(|e| e.to_string())?.reverb.is_some() {
            hits += 1;
        }
    }
    let rate = hits as f64 / draws as f64;
    ensure((rate - 0.8).abs() <= 0.015, || format!("reverb applied at rate {rate}"))?;

    let mut impulse = vec![0.0f32; 400];
    impulse[0] = 1.0;
    let out = add_reverb(&clean, &Waveform::new(impulse)).map_err(|e| e.to_string())?;
    let dev = out
        .samples
        .iter()
        .zip(&clean.samples)
        .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
    ensure(dev <= 1e-6, || format!("impulse RIR changed the signal by {dev:.3e}"))?;
    Ok(format!(
        "{checked} SNR targets within {worst_snr:.3} dB, reverb rate {rate:.4}, impulse deviation {dev:.1e}"
    ))
}

/// Unit points around three orthogonal directions.
pub fn blobs(seed: u64, per: usize, spread: f32) -> (Tensor<f32>, Vec<usize>) {
    let mut r = rng(seed);
    let d = 6;
    let mut data = Vec::new();
    let mut truth = Vec::new();
    for c in 0..3 {
        for _ in 0..per {
            let mut v: Vec<f32> = (0..d).map(|_| spread * r.random_range(-1.0..1.0f32)).collect();
            v[2 * c] += 1.0;
            let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            data.extend(v.iter().map(|x| x / n));
            truth.push(c);
        }
    }
    (Tensor::new(vec![3 * per, d], data).unwrap(), truth)
}

pub fn clustering() -> Outcome {
    let mut worst_purity: f64 = 1.0;
    let mut iters = 0;
    for seed in 0..10 {
        let (points, truth) = blobs(seed, 40, 0.15);
        let km = kmeans(&points, 3, 50, 0.0, &mut rng(seed + 100)).map_err(|e| e.to_string())?;
        let mut correct = 0;
        for k in 0..3 {
            let mut counts = [0usize; 3];
            for (i, &a) in km.assignments.iter().enumerate() {
                if a == k {
                    counts[truth[i]] += 1;
                }
            }
            correct += counts.iter().max().unwrap();
        }
        let purity = correct as f64 / truth.len() as f64;
        worst_purity = worst_purity.min(purity);
        ensure(purity == 1.0, || format!("seed {seed}: purity {purity}"))?;
        iters += km.inertia.len();
    }
    for seed in 0..10 {
        let (points, _) = blobs(seed, 60, 1.5);
        let km = kmeans(&points, 7, 100, 0.0, &mut rng(seed)).map_err(|e| e.to_string())?;
        for w in km.inertia.windows(2) {
            ensure(w[1] <= w[0] + 1e-9, || format!("seed {seed}: inertia rose from {} to {}", w[0], w[1]))?;
        }
    }
    let c = [1.0f32, 0.0];
    let v = [1.0f32, 0.5];
    let members: Vec<&[f32]> = (0..100).map(|_| &v[..]).collect();
    let phi = concentration(&members, &c, 0.01).map_err(|e| e.to_string())?;
    ensure((phi - 0.10857).abs() <= 1e-4, || format!("phi = {phi}"))?;
    Ok(format!(
        "3 blobs at purity {worst_purity} over 10 seeds ({iters} Lloyd iterations), inertia monotone, phi = {phi:.5}"
    ))
}
