//! Acceptance criteria, one PASS/FAIL line each.
//!
//! `cargo test --test acceptance` runs all of them; `-- 1 4 7` runs a subset.
//! A failing criterion is reported, not raised: the process exits non-zero
//! only when the harness itself breaks.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twofloat::TwoFloat;

use seqlab::data::{gen_task, Batch, BatchStream, Corpus, Pair, TaskConfig, TaskKind, BOS, EOS};
use seqlab::decode::{beam_decode, DecodeConfig, ModelStepper};
use seqlab::experiment::{evaluate, gap_curve};
use seqlab::metrics::{fuzzy_precision_per_step, spearman, strict_precision_per_step, WindowKind};
use seqlab::model::{Graph, Model, ModelConfig, StepRngs};
use seqlab::optim::{Adam, OptimConfig};
use seqlab::rng;
use seqlab::sampler::{Prediction, Sampler, SamplerConfig, SamplingMode, Trainer};
use seqlab::schedules::{presets, Direction, Family, JointMethod, JointSpec, Schedule, ScheduleSpec};
use seqlab::tensor::Tensor;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    (1, "schedule closed forms", c1_schedules),
    (2, "accumulated-error quadrature", c2_accumulated),
    (3, "gradient checks", c3_gradients),
    (4, "degenerate two-pass equivalence", c4_degenerate),
    (5, "selection-mask statistics", c5_mask_statistics),
    (6, "beam oracle", c6_beam_oracle),
    (7, "train/inference gap shape", c7_gap_shape),
    (8, "decoding-step strategy orderings", c8_strategies),
    (9, "joint strategy orderings", c9_joint),
    (10, "metric self-consistency", c10_metrics),
];

fn main() {
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (mut ran, mut passed) = (0, 0);
    for (id, name, run) in CRITERIA {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let o = run();
        let secs = t0.elapsed().as_secs_f64();
        println!(
            "{} criterion {id:>2} {name} ({secs:.1}s): {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        ran += 1;
        passed += o.pass as usize;
    }
    println!("acceptance: {passed}/{ran} criteria passed");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn log_uniform(r: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    10f64.powf(r.gen_range(lo..hi))
}

// ---------------------------------------------------------------- 1

fn dd(x: f64) -> TwoFloat {
    TwoFloat::from(x)
}

/// Decay value in double-double arithmetic.
fn dd_decay(spec: &ScheduleSpec, x: f64) -> TwoFloat {
    let x = dd(x);
    match spec.family {
        Family::Linear => {
            let v = dd(spec.k) * x + dd(spec.b);
            let v = if v < dd(spec.epsilon) { dd(spec.epsilon) } else { v };
            if v > dd(1.0) {
                dd(1.0)
            } else {
                v
            }
        }
        Family::Exponential => (x * dd(spec.k).ln()).exp(),
        Family::Sigmoid => {
            let k = dd(spec.k);
            let e = (x / k).exp();
            if e.hi().is_infinite() {
                dd(0.0)
            } else {
                k / (k + e)
            }
        }
        Family::AlwaysSample => dd(0.0),
        Family::Uniform => dd(spec.uniform_p),
        Family::Empirical => {
            let t = spec.empirical_table.as_ref().unwrap();
            let i = (x.hi() as usize).min(t.len() - 1);
            dd(1.0) - dd(t[i])
        }
    }
}

fn dd_value(spec: &ScheduleSpec, x: f64) -> f64 {
    let d = dd_decay(spec, x);
    match spec.direction {
        Direction::Decay => d.hi() + d.lo(),
        Direction::Increase => {
            let v = dd(1.0) - d;
            v.hi() + v.lo()
        }
    }
}

fn random_spec(r: &mut ChaCha8Rng, family: Family, decoding_scale: bool) -> ScheduleSpec {
    let mut s = match family {
        Family::Linear => {
            let k = if decoding_scale {
                -log_uniform(r, -3.0, -0.5)
            } else {
                -log_uniform(r, -6.5, 0.0)
            };
            ScheduleSpec::linear(k, r.gen_range(0.0..1.0), r.gen_range(0.0..1.5))
        }
        Family::Exponential => {
            let k = if decoding_scale {
                r.gen_range(0.5..0.9999)
            } else {
                1.0 - log_uniform(r, -6.0, -0.05)
            };
            ScheduleSpec::exponential(k)
        }
        Family::Sigmoid => ScheduleSpec::sigmoid(if decoding_scale {
            log_uniform(r, 0.0, 2.5)
        } else {
            log_uniform(r, 0.0, 5.0)
        }),
        Family::AlwaysSample => ScheduleSpec::always_sample(),
        Family::Uniform => ScheduleSpec::uniform(r.gen_range(0.0..=1.0)),
        Family::Empirical => {
            let n = r.gen_range(1..200);
            ScheduleSpec::empirical((0..n).map(|_| r.gen_range(0.0..=1.0)).collect())
        }
    };
    if r.gen_bool(0.5) {
        s = s.increase();
    }
    s
}

const FAMILIES: [Family; 6] = [
    Family::Linear,
    Family::Exponential,
    Family::Sigmoid,
    Family::AlwaysSample,
    Family::Uniform,
    Family::Empirical,
];

fn c1_schedules() -> Outcome {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    let mut violations = Vec::new();
    for family in FAMILIES {
        for _ in 0..1000 {
            let spec = random_spec(&mut r, family, false);
            let s = Schedule::new(spec.clone()).unwrap();
            let step = log_uniform(&mut r, 0.0, 6.5) as u64 - 1;
            let later = step + 1 + log_uniform(&mut r, 0.0, 5.0) as u64;
            let (v, w) = (s.eval(step), s.eval(later));
            worst = worst.max((v - dd_value(&spec, step as f64)).abs());
            if !(0.0..=1.0).contains(&v) {
                violations.push(format!("{} at {step} = {v}", spec.label()));
            }
            // an arbitrary error table carries no monotonicity
            let monotone = match (family, spec.direction) {
                (Family::Empirical, _) => true,
                (_, Direction::Decay) => w <= v,
                (_, Direction::Increase) => w >= v,
            };
            if !monotone {
                violations.push(format!("{} not monotone: {step}->{v}, {later}->{w}", spec.label()));
            }
        }
    }
    let pass = worst <= 1e-9 && violations.is_empty();
    outcome(
        pass,
        format!(
            "6000 draws, max |closed form - double-double| = {worst:.2e} (tol 1e-9), bound/monotonicity violations {} {:?}",
            violations.len(),
            violations.first()
        ),
    )
}

// ---------------------------------------------------------------- 2

/// Golden probability from the defining formulas, independent of the library.
fn reference_value(spec: &ScheduleSpec, x: f64) -> f64 {
    let d = match spec.family {
        Family::Linear => (spec.k * x + spec.b).max(spec.epsilon).min(1.0),
        Family::Exponential => (x * spec.k.ln()).exp(),
        Family::Sigmoid => 1.0 / (1.0 + (x / spec.k).exp() / spec.k),
        Family::AlwaysSample => 0.0,
        Family::Uniform => spec.uniform_p,
        Family::Empirical => {
            let t = spec.empirical_table.as_ref().unwrap();
            let last = t.len() - 1;
            let e = if x >= last as f64 {
                t[last]
            } else {
                let i = x.floor() as usize;
                let f = x - i as f64;
                t[i] * (1.0 - f) + t[i + 1] * f
            };
            1.0 - e
        }
    };
    match spec.direction {
        Direction::Decay => d,
        Direction::Increase => 1.0 - d,
    }
}

const GK_NODES: [f64; 8] = [
    0.9914553711208126,
    0.9491079123427585,
    0.8648644233597691,
    0.7415311855993945,
    0.5860872354676911,
    0.4058451513773972,
    0.20778495500789848,
    0.0,
];
const GK_WEIGHTS: [f64; 8] = [
    0.022935322010529224,
    0.06309209262997856,
    0.10479001032225019,
    0.14065325971552592,
    0.1690047266392679,
    0.19035057806478542,
    0.20443294007529889,
    0.20948214108472782,
];
const G_WEIGHTS: [f64; 4] = [0.1294849661688697, 0.27970539148927664, 0.3818300505051189, 0.4179591836734694];

/// Gauss-Kronrod 7/15 on one panel: (Kronrod estimate, |Kronrod - Gauss|).
fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = GK_WEIGHTS[7] * fc;
    let mut g = G_WEIGHTS[3] * fc;
    for j in 0..7 {
        let s = f(c - h * GK_NODES[j]) + f(c + h * GK_NODES[j]);
        k += GK_WEIGHTS[j] * s;
        if j % 2 == 1 {
            g += G_WEIGHTS[j / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

fn adaptive_gk(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let (k, err) = gk15(f, a, b);
    if err <= tol || depth == 0 {
        return k;
    }
    let m = 0.5 * (a + b);
    adaptive_gk(f, a, m, tol / 2.0, depth - 1) + adaptive_gk(f, m, b, tol / 2.0, depth - 1)
}

fn quadrature_accum(spec: &ScheduleSpec, t: f64) -> f64 {
    let mut cuts: Vec<f64> = (0..=t.floor() as usize).map(|i| i as f64).collect();
    if spec.family == Family::Linear {
        for y in [1.0, spec.epsilon] {
            cuts.push((y - spec.b) / spec.k);
        }
    }
    cuts.push(t);
    cuts.retain(|&x| (0.0..=t).contains(&x));
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let f = |x: f64| 1.0 - reference_value(spec, x);
    cuts.windows(2).map(|w| adaptive_gk(&f, w[0], w[1], 1e-14, 30)).sum()
}

fn c2_accumulated() -> Outcome {
    let mut r = rng(2);
    let (mut worst, mut at) = (0.0f64, String::new());
    let mut n = 0;
    for family in FAMILIES {
        for _ in 0..200 {
            let spec = random_spec(&mut r, family, true);
            let s = Schedule::new(spec.clone()).unwrap();
            let t = r.gen_range(0.0..=512.0);
            let got = s.accumulated_errors(t);
            let want = quadrature_accum(&spec, t);
            let rel = if want == 0.0 {
                got.abs() / 1e-12
            } else {
                (got - want).abs() / want.abs()
            };
            if rel > worst {
                worst = rel;
                at = format!("{} t={t:.3}: {got} vs {want}", spec.label());
            }
            n += 1;
        }
    }
    outcome(
        worst <= 1e-6,
        format!("{n} draws over t in [0,512], max relative error {worst:.2e} (tol 1e-6); worst {at}"),
    )
}

// ---------------------------------------------------------------- 3

fn micro_config(vocab: usize, dropout: f64) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        hidden_size: 8,
        filter_size: 16,
        num_heads: 2,
        num_encoder_layers: 2,
        num_decoder_layers: 2,
        dropout,
        label_smoothing: 0.1,
        max_positions: 16,
        ..ModelConfig::default()
    }
}

fn micro_batch() -> Batch {
    let pairs = vec![
        Pair {
            src: vec![5, 6, 7],
            tgt: vec![8, 9, 10, 5],
        },
        Pair {
            src: vec![10],
            tgt: vec![5, 6],
        },
        Pair {
            src: vec![9, 9, 8, 7, 6],
            tgt: vec![7, 7, 8],
        },
    ];
    Batch::from_pairs(&pairs, &[0, 1, 2]).unwrap()
}

enum Objective {
    TeacherForcing,
    TwoPass(Sampler),
}

fn loss_and_grads(m: &Model<f64>, b: &Batch, obj: &Objective, with_grads: bool) -> (f64, Vec<Option<Tensor<f64>>>, f64) {
    let mut g = if with_grads { Graph::new(m) } else { Graph::frozen(m) };
    let mut rngs = StepRngs::for_step(31, 5);
    let (l, golden) = match obj {
        Objective::TeacherForcing => (g.teacher_forcing_loss(b, Some(&mut rngs)).unwrap(), 1.0),
        Objective::TwoPass(s) => {
            let mut mr = rng::stream_at(31, "sampler", 5);
            let (l, mix) = g.two_pass_loss(s, b, 5, Some(&mut rngs), &mut mr).unwrap();
            (l, mix.golden_fraction())
        }
    };
    let v = g.tape.value(l).item();
    let grads = if with_grads { g.backward(l).unwrap() } else { Vec::new() };
    (v, grads, golden)
}

fn c3_gradients() -> Outcome {
    let b = micro_batch();
    let two_pass = |prediction| {
        Objective::TwoPass(
            Sampler::new(SamplerConfig {
                mode: SamplingMode::DecodingSteps,
                schedule: ScheduleSpec::uniform(0.5),
                prediction,
                grad_through_predictions: true,
                ..SamplerConfig::default()
            })
            .unwrap(),
        )
    };
    let objectives = [
        ("teacher forcing", Objective::TeacherForcing),
        ("two-pass soft mix", two_pass(Prediction::SoftMix)),
        ("two-pass argmax embedding", two_pass(Prediction::ArgmaxEmbedding)),
    ];
    let h = 1e-6;
    let mut pass = true;
    let mut parts = Vec::new();
    for (seed, (name, obj)) in objectives.iter().enumerate() {
        let m = Model::<f64>::new(micro_config(12, 0.1), 40 + seed as u64).unwrap();
        let (_, grads, golden) = loss_and_grads(&m, &b, obj, true);
        let (mut worst, mut checked) = (0.0f64, 0);
        for (id, t) in m.params.tensors.iter().enumerate() {
            let ga = grads[id].clone().unwrap_or_else(|| Tensor::zeros(t.shape()));
            for j in 0..t.len() {
                let shifted = |d: f64| {
                    let mut mm = m.clone();
                    mm.params.tensors[id].data_mut()[j] += d;
                    loss_and_grads(&mm, &b, obj, false).0
                };
                let num = (shifted(h) - shifted(-h)) / (2.0 * h);
                let a = ga.data()[j];
                worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-4));
                checked += 1;
            }
        }
        let mixed = golden > 0.0 && golden < 1.0;
        pass &= worst <= 1e-4 && (matches!(obj, Objective::TeacherForcing) || mixed);
        parts.push(format!(
            "{name}: {checked} coords, max rel {worst:.1e}, golden fraction {golden:.2}"
        ));
    }
    outcome(pass, format!("{} (tol 1e-4)", parts.join("; ")))
}

// ---------------------------------------------------------------- 4

fn c4_degenerate() -> Outcome {
    let mut r = rng(4);
    let mut loss_bits = 0;
    let mut grad_equal = 0;
    for i in 0..100u64 {
        let task = TaskConfig {
            kind: [TaskKind::Copy, TaskKind::Reverse, TaskKind::NoisyMap][i as usize % 3],
            vocab_size: r.gen_range(8..30),
            min_len: 1,
            max_len: r.gen_range(2..10),
            count: r.gen_range(1..8),
            // coprime with every content vocabulary size
            map_a: 1,
            seed: i,
            ..TaskConfig::default()
        };
        let c = gen_task(&task).unwrap();
        let idx: Vec<usize> = (0..c.len()).collect();
        let b = Batch::from_pairs(&c.pairs, &idx).unwrap();
        let cfg = ModelConfig {
            vocab_size: c.vocab.len(),
            hidden_size: [8, 16][i as usize % 2],
            filter_size: 16,
            num_heads: 2,
            num_encoder_layers: r.gen_range(1..3),
            num_decoder_layers: r.gen_range(1..3),
            dropout: r.gen_range(0.0..0.3),
            label_smoothing: r.gen_range(0.0..0.2),
            max_positions: 16,
            ..ModelConfig::default()
        };
        let m = Model::<f64>::new(cfg, i).unwrap();
        let golden = [
            (SamplingMode::DecodingSteps, ScheduleSpec::never_sample()),
            (SamplingMode::DecodingSteps, ScheduleSpec::uniform(1.0)),
            (SamplingMode::TrainingSteps, ScheduleSpec::never_sample()),
        ][i as usize % 3]
            .clone();
        let s = Sampler::new(SamplerConfig {
            mode: golden.0,
            schedule: golden.1,
            prediction: if r.gen_bool(0.5) {
                Prediction::SoftMix
            } else {
                Prediction::ArgmaxEmbedding
            },
            grad_through_predictions: r.gen_bool(0.5),
            ..SamplerConfig::default()
        })
        .unwrap();
        let step = r.gen_range(0..1000);
        let mut g1 = Graph::new(&m);
        let l1 = g1.teacher_forcing_loss(&b, Some(&mut StepRngs::for_step(i, step))).unwrap();
        let mut g2 = Graph::new(&m);
        let mut mr = rng::stream_at(i, "sampler", step);
        let (l2, _) = g2
            .two_pass_loss(&s, &b, step, Some(&mut StepRngs::for_step(i, step)), &mut mr)
            .unwrap();
        loss_bits += (g1.tape.value(l1).item().to_bits() == g2.tape.value(l2).item().to_bits()) as usize;
        let values = |gs: Vec<Option<Tensor<f64>>>| gs.into_iter().map(|t| t.map(|t| t.data().to_vec())).collect::<Vec<_>>();
        grad_equal += (values(g1.backward(l1).unwrap()) == values(g2.backward(l2).unwrap())) as usize;
    }
    outcome(
        loss_bits == 100 && grad_equal == 100,
        format!("bitwise-equal losses {loss_bits}/100, equal gradients {grad_equal}/100"),
    )
}

// ---------------------------------------------------------------- 5

fn c5_mask_statistics() -> Outcome {
    const DRAWS: usize = 100_000;
    const STEPS: usize = 10;
    let mut r = rng(5);
    let (mut worst_z, mut outside, mut checks) = (0.0f64, 0, 0);
    for s_id in 0..20u64 {
        let fam = [
            Family::Linear,
            Family::Exponential,
            Family::Sigmoid,
            Family::Uniform,
            Family::Empirical,
        ][s_id as usize % 5];
        let g = random_spec(&mut r, fam, true);
        let mode = [SamplingMode::DecodingSteps, SamplingMode::TrainingSteps, SamplingMode::Joint][s_id as usize % 3];
        let f = ScheduleSpec::sigmoid(log_uniform(&mut r, 1.0, 3.0));
        let method = [
            JointMethod::Product,
            JointMethod::ArithmeticMean,
            JointMethod::Composite,
            JointMethod::CompositeAlt,
        ][r.gen_range(0..4)];
        let warm = r.gen_range(0..50);
        let train_step: u64 = r.gen_range(0..2000);
        let cfg = SamplerConfig {
            mode,
            schedule: if mode == SamplingMode::TrainingSteps {
                f.clone()
            } else {
                g.clone()
            },
            joint: JointSpec::new(method, f.clone(), g.clone()),
            warm_start_steps: warm,
            ..SamplerConfig::default()
        };
        let sampler = Sampler::new(cfg).unwrap();
        let expected = |t: u64| -> f64 {
            if train_step < warm {
                return 1.0;
            }
            let i = train_step - warm;
            match mode {
                SamplingMode::DecodingSteps => g.eval(t).unwrap(),
                SamplingMode::TrainingSteps => f.eval(i).unwrap(),
                SamplingMode::Joint => JointSpec::new(method, f.clone(), g.clone()).eval(i, t).unwrap(),
                SamplingMode::TeacherForcing => 1.0,
            }
        };
        let mut mr = rng::stream_at(50 + s_id, "sampler", train_step);
        let (mask, _) = sampler.selection_mask(train_step, DRAWS, STEPS + 1, &mut mr);
        for pos in 1..=STEPS {
            let p = expected(pos as u64 - 1);
            let hits = (0..DRAWS).filter(|&b| mask[b * (STEPS + 1) + pos]).count();
            let frac = hits as f64 / DRAWS as f64;
            let sd = (p * (1.0 - p) / DRAWS as f64).sqrt();
            let z = if sd == 0.0 {
                if frac == p {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (frac - p).abs() / sd
            };
            worst_z = worst_z.max(z);
            outside += (z > 3.0) as usize;
            checks += 1;
        }
    }
    outcome(
        outside == 0,
        format!("20 schedules x {STEPS} decoding steps x 1e5 draws: {outside}/{checks} outside 3 sd, max |z| = {worst_z:.2}"),
    )
}

// ---------------------------------------------------------------- 6

/// Per-position log-probabilities of `ids` after `BOS`, from a full
/// teacher-forced forward pass (not the incremental decoder).
fn sequence_log_probs(m: &Model<f64>, src: &[usize], ids: &[usize]) -> f64 {
    let v = m.config.vocab_size;
    let mut g = Graph::frozen(m);
    let enc = g.encode(src, &vec![true; src.len()], 1, None).unwrap();
    let inputs: Vec<usize> = std::iter::once(BOS).chain(ids[..ids.len() - 1].iter().copied()).collect();
    let x = g.embed_target(&inputs, 1).unwrap();
    let l = g.decode_logits(x, &enc, &vec![true; inputs.len()], None).unwrap();
    let data = g.tape.value(l).data();
    ids.iter()
        .enumerate()
        .map(|(p, &w)| {
            let row = &data[p * v..(p + 1) * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
            row[w] - lse
        })
        .sum()
}

fn exhaustive_best(m: &Model<f64>, src: &[usize], cfg: &DecodeConfig) -> (Vec<usize>, f64) {
    let v = m.config.vocab_size;
    let content: Vec<usize> = (0..v).filter(|&w| w != EOS).collect();
    let mut prefixes: Vec<Vec<usize>> = vec![vec![]];
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    for len in 1..=cfg.max_length {
        for p in &prefixes {
            let mut ids = p.clone();
            ids.push(EOS);
            let score = sequence_log_probs(m, src, &ids) / cfg.lp(len);
            if score > best.1 {
                best = (p.clone(), score);
            }
        }
        prefixes = prefixes
            .iter()
            .flat_map(|p| content.iter().map(move |&w| [p.as_slice(), &[w]].concat()))
            .collect();
    }
    best
}

fn c6_beam_oracle() -> Outcome {
    let mut r = rng(6);
    let (mut same, mut worse_score, mut max_gap, mut at_limit) = (0, 0, 0.0f64, 0);
    let mut example = String::new();
    for i in 0..200u64 {
        let v = r.gen_range(3..=5);
        let mut m = Model::<f64>::new(micro_config(v, 0.0), 600 + i).unwrap();
        // sharpen the output distribution by a random gain on the tied embedding
        let gain = r.gen_range(1.0..6.0);
        let names = &m.params.names;
        let id = names
            .iter()
            .position(|n| n == "embed.tgt")
            .or_else(|| names.iter().position(|n| n == "embed.src"))
            .unwrap();
        for x in m.params.tensors[id].data_mut() {
            *x *= gain;
        }
        let src: Vec<usize> = (0..r.gen_range(1..5)).map(|_| r.gen_range(1..v)).collect();
        let cfg = DecodeConfig {
            beam_size: v,
            max_length: 3,
            ..DecodeConfig::default()
        };
        let stepper = ModelStepper::new(&m, &src, &vec![true; src.len()], 1).unwrap();
        let got = beam_decode(&stepper, 1, &cfg).unwrap().remove(0);
        let (want, score) = exhaustive_best(&m, &src, &cfg);
        let best = got.best();
        if best.tokens == want && best.finished {
            same += 1;
        } else {
            at_limit += (want.len() + 1 == cfg.max_length) as usize;
        }
        if !(best.tokens == want && best.finished) && example.is_empty() {
            example = format!(
                "; e.g. V={v}: beam {:?} ({:.4}) vs exhaustive {:?} ({:.4})",
                best.tokens, best.score, want, score
            );
        }
        worse_score += (best.score > score + 1e-9) as usize;
        max_gap = max_gap.max(score - best.score);
    }
    outcome(
        same == 200 && worse_score == 0,
        format!("{same}/200 best sequences agree ({at_limit} misses end at max_length), beam above exhaustive optimum {worse_score} times, max score shortfall {max_gap:.2e}{example}"),
    )
}

// ---------------------------------------------------------------- 7, 8, 9

const TOY_BUDGET: usize = 1000;

fn toy_task(count: usize) -> TaskConfig {
    TaskConfig {
        kind: TaskKind::NoisyMap,
        vocab_size: 50,
        min_len: 20,
        max_len: 60,
        count,
        noise: 0.1,
        seed: 7,
        ..TaskConfig::default()
    }
}

fn toy_model(vocab: usize, seed: u64) -> Model<f32> {
    let cfg = ModelConfig {
        vocab_size: vocab,
        hidden_size: 64,
        filter_size: 256,
        num_heads: 4,
        num_encoder_layers: 2,
        num_decoder_layers: 2,
        dropout: 0.1,
        label_smoothing: 0.1,
        max_positions: 128,
        ..ModelConfig::default()
    };
    Model::new(cfg, seed).unwrap()
}

fn toy_optim() -> OptimConfig {
    OptimConfig {
        lr_scale: 1.0,
        warmup_steps: 1000,
        ..OptimConfig::default()
    }
}

fn greedy() -> DecodeConfig {
    DecodeConfig {
        beam_size: 1,
        max_length: 100,
        ..DecodeConfig::default()
    }
}

fn rho(curve: &seqlab::metrics::StepCurve) -> f64 {
    let steps: Vec<f64> = curve.steps.iter().map(|&s| s as f64).collect();
    spearman(&steps, &curve.values)
}

fn c7_gap_shape() -> Outcome {
    let mut corpus = gen_task(&toy_task(21_000)).unwrap();
    let held_out = corpus.split_off(1000);
    let mut m = toy_model(corpus.vocab.len(), 70);
    let mut stream = BatchStream::new(&corpus.pairs, TOY_BUDGET, 71).unwrap();
    let tf = Sampler::new(SamplerConfig {
        mode: SamplingMode::TeacherForcing,
        ..SamplerConfig::default()
    })
    .unwrap();
    let mut trainer = Trainer::new(tf, Adam::new(toy_optim(), &m.params), 72);
    let mut report = Vec::new();
    let mut last = (0.0, 0.0);
    for stage in [1000u64, 2000, 3000] {
        let recs = trainer.train(&mut m, &mut || stream.next_batch(), stage, |_| Ok(())).unwrap();
        let loss = recs.iter().rev().take(100).map(|r| r.loss).sum::<f64>() / 100.0;
        let g = gap_curve(&m, &held_out.pairs, &greedy(), 4000, 3).unwrap();
        // steps observed in fewer than 30 held-out pairs are too noisy to rank
        let (train, infer) = (g.training.with_min_count(30), g.inference.with_min_count(30));
        last = (rho(&train), rho(&infer));
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        report.push(format!(
            "step {stage}: loss {loss:.3}, rho_train {:+.2}, rho_inf {:+.2}, mean precision train {:.3} / inference {:.3}",
            last.0,
            last.1,
            mean(&train.values),
            mean(&infer.values)
        ));
    }
    outcome(
        last.1 <= -0.5 && last.0.abs() <= 0.3,
        format!(
            "final checkpoint needs rho_inf <= -0.5 and |rho_train| <= 0.3; {}",
            report.join("; ")
        ),
    )
}

/// A strategy fine-tuned from the shared warm start.
struct Strategy {
    name: &'static str,
    sampler: SamplerConfig,
}

fn decoding(name: &'static str, schedule: ScheduleSpec) -> Strategy {
    Strategy {
        name,
        sampler: SamplerConfig {
            mode: SamplingMode::DecodingSteps,
            schedule,
            ..SamplerConfig::default()
        },
    }
}

/// Training-step schedule scaled to the fine-tuning length.
fn toy_f() -> ScheduleSpec {
    ScheduleSpec::sigmoid(50.0)
}

fn joint(name: &'static str, method: JointMethod) -> Strategy {
    let g = presets::translation_decoding_steps().exponential;
    Strategy {
        name,
        sampler: SamplerConfig {
            mode: SamplingMode::Joint,
            joint: JointSpec::new(method, toy_f(), g),
            ..SamplerConfig::default()
        },
    }
}

const WARM_STEPS: u64 = 1000;
const TUNE_STEPS: u64 = 300;
const SEEDS: [u64; 3] = [0, 1, 2];

fn strategies() -> Vec<Strategy> {
    let dec = presets::translation_decoding_steps();
    vec![
        decoding("teacher forcing", ScheduleSpec::never_sample()),
        decoding("always sample", ScheduleSpec::always_sample()),
        decoding("uniform", ScheduleSpec::uniform(0.5)),
        decoding("exponential decay", dec.exponential.clone()),
        decoding("linear decay", dec.linear.clone()),
        decoding("sigmoid decay", dec.sigmoid.clone()),
        decoding("exponential increase", dec.exponential.clone().increase()),
        decoding("linear increase", dec.linear.clone().increase()),
        decoding("sigmoid increase", dec.sigmoid.clone().increase()),
        joint("product", JointMethod::Product),
        joint("arithmetic mean", JointMethod::ArithmeticMean),
        joint("composite", JointMethod::Composite),
    ]
}

/// Held-out greedy token accuracy per strategy and seed. Every strategy is
/// fine-tuned from the same teacher-forced warm start on the same batches.
/// Computed once and shared by criteria 8 and 9.
fn strategy_accuracies() -> &'static (Vec<&'static str>, Vec<Vec<f64>>) {
    static CELL: OnceLock<(Vec<&'static str>, Vec<Vec<f64>>)> = OnceLock::new();
    CELL.get_or_init(|| {
        let strategies = strategies();
        let mut corpus: Corpus = gen_task(&toy_task(20_500)).unwrap();
        let held_out = corpus.split_off(500);
        let mut acc = vec![Vec::new(); strategies.len()];
        for seed in SEEDS {
            let mut warm = toy_model(corpus.vocab.len(), 100 + seed);
            let mut stream = BatchStream::new(&corpus.pairs, TOY_BUDGET, 200 + seed).unwrap();
            let tf = Sampler::new(SamplerConfig {
                mode: SamplingMode::TeacherForcing,
                ..SamplerConfig::default()
            })
            .unwrap();
            let mut trainer = Trainer::new(tf, Adam::new(toy_optim(), &warm.params), 300 + seed);
            trainer
                .train(&mut warm, &mut || stream.next_batch(), WARM_STEPS, |_| Ok(()))
                .unwrap();
            for (k, s) in strategies.iter().enumerate() {
                let mut m = warm.clone();
                let sampler = Sampler::new(SamplerConfig {
                    warm_start_steps: WARM_STEPS,
                    ..s.sampler.clone()
                })
                .unwrap();
                let mut t = Trainer::new(sampler, trainer.adam.clone(), trainer.seed);
                let mut st = stream.clone();
                t.train(&mut m, &mut || st.next_batch(), WARM_STEPS + TUNE_STEPS, |_| Ok(()))
                    .unwrap();
                acc[k].push(evaluate(&m, &held_out.pairs, &greedy(), 4000).unwrap().token_accuracy);
            }
        }
        (strategies.iter().map(|s| s.name).collect(), acc)
    })
}

fn index(names: &[&str], name: &str) -> usize {
    names.iter().position(|n| *n == name).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `(holds, text)` for "a beats b" on seed means, with the paired differences.
fn ordering(acc: &[Vec<f64>], names: &[&str], a: usize, b: usize, or_equal: bool) -> (bool, String) {
    let d = mean(&acc[a]) - mean(&acc[b]);
    let per_seed: Vec<String> = acc[a].iter().zip(&acc[b]).map(|(x, y)| format!("{:+.4}", x - y)).collect();
    let holds = if or_equal { d >= 0.0 } else { d > 0.0 };
    let rel = if or_equal { ">=" } else { ">" };
    (
        holds,
        format!(
            "{} {rel} {}: {d:+.4} [{}] {}",
            names[a],
            names[b],
            per_seed.join(" "),
            if holds { "ok" } else { "VIOLATED" }
        ),
    )
}

fn judge(pairs: &[(&str, &str)], or_equal: bool, shown: &[&str]) -> Outcome {
    let (names, acc) = strategy_accuracies();
    let checks: Vec<(bool, String)> = pairs
        .iter()
        .map(|(a, b)| ordering(acc, names, index(names, a), index(names, b), or_equal))
        .collect();
    let table: Vec<String> = shown.iter().map(|n| format!("{n} {:.4}", mean(&acc[index(names, n)]))).collect();
    let lines: Vec<String> = checks.iter().map(|c| c.1.clone()).collect();
    outcome(
        checks.iter().all(|c| c.0),
        format!(
            "mean held-out token accuracy over {} seeds: {}. {}",
            SEEDS.len(),
            table.join(", "),
            lines.join("; ")
        ),
    )
}

fn c8_strategies() -> Outcome {
    judge(
        &[
            ("exponential decay", "uniform"),
            ("uniform", "always sample"),
            ("exponential decay", "exponential increase"),
            ("linear decay", "linear increase"),
            ("sigmoid decay", "sigmoid increase"),
        ],
        false,
        &[
            "teacher forcing",
            "always sample",
            "uniform",
            "exponential decay",
            "linear decay",
            "sigmoid decay",
            "exponential increase",
            "linear increase",
            "sigmoid increase",
        ],
    )
}

fn c9_joint() -> Outcome {
    judge(
        &[("composite", "product"), ("composite", "arithmetic mean")],
        true,
        &["exponential decay", "product", "arithmetic mean", "composite"],
    )
}

// ---------------------------------------------------------------- 10

fn c10_metrics() -> Outcome {
    let mut r = rng(10);
    let (mut eq1, mut ge3) = (0, 0);
    for _ in 0..1000 {
        let v = r.gen_range(6..12);
        let n = r.gen_range(1..20);
        let mut refs = Vec::new();
        let mut hyps = Vec::new();
        for _ in 0..n {
            let len = r.gen_range(1..15);
            let rf: Vec<usize> = (0..len).map(|_| r.gen_range(5..v)).collect();
            let h: Vec<usize> = (0..r.gen_range(0..18))
                .map(|p| if p < len && r.gen_bool(0.6) { rf[p] } else { r.gen_range(5..v) })
                .collect();
            refs.push(rf);
            hyps.push(h);
        }
        let strict = strict_precision_per_step(&hyps, &refs).unwrap();
        let w1 = fuzzy_precision_per_step(&hyps, &refs, 1, WindowKind::Centered).unwrap();
        let w3 = fuzzy_precision_per_step(&hyps, &refs, 3, WindowKind::Centered).unwrap();
        eq1 += (w1 == strict) as usize;
        ge3 += (w3.steps == strict.steps && w3.values.iter().zip(&strict.values).all(|(a, b)| a >= b)) as usize;
    }
    outcome(
        eq1 == 1000 && ge3 == 1000,
        format!("window 1 == strict on {eq1}/1000 corpora, window 3 >= strict on {ge3}/1000"),
    )
}
