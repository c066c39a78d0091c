//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use oscar_kv::cache::{
    evaluate_distortion, evaluate_dump, monolithic_attention, segmented_attention, summarize, AttentionSegment,
    CacheLayout, EvalMode, EvalOptions,
};
use oscar_kv::calibration::{calibrate_bundle, head_query_covariance, pbr_permutation, CalibrationOptions, RotationKind};
use oscar_kv::linalg::hadamard_matrix;
use oscar_kv::quant::{dequantize_row, effective_bpe, fake_quantize, pack_codes, quantize_row, unpack_codes, QuantConfig};
use oscar_kv::synth::{generate, SynthConfig};
use oscar_kv::verify::{
    check_alignment_diagnostic, check_rearrangement_optimality, check_trace_identities, eigenbasis_alignment,
    worked_example_report,
};

const SEED: u64 = 20_240_601;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome { passed, detail: detail.into() }
    }
}

fn timed(f: impl FnOnce() -> Outcome, budget: Option<Duration>) -> Outcome {
    let start = Instant::now();
    let mut o = f();
    let took = start.elapsed();
    if let Some(b) = budget {
        o.passed &= took < b;
        o.detail = format!("{}; {:.2}s of {}s", o.detail, took.as_secs_f64(), b.as_secs());
    }
    o
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn trace_identities() -> Outcome {
    let r = check_trace_identities(500, 64, SEED).unwrap();
    Outcome::new(r.passed && r.tolerance == 1e-8, format!("worst relative gap {:.2e} over {} triples", r.measured, r.trials))
}

fn hadamard_equalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = 0.0f64;
    for d in (1..=7).map(|k| 1usize << k) {
        let h = hadamard_matrix(d).unwrap();
        for _ in 0..20 {
            let lambda: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..100.0)).collect();
            let mean = lambda.iter().sum::<f64>() / d as f64;
            for i in 0..d {
                let entry: f64 = (0..d).map(|j| h[(j, i)] * h[(j, i)] * lambda[j]).sum();
                worst = worst.max((entry - mean).abs() / mean);
            }
        }
    }
    let dump = generate(&SynthConfig::default()).unwrap();
    let rows = worked_example_report(dump.head(0, 0).unwrap(), 64).unwrap();
    let shown: Vec<String> = rows
        .iter()
        .filter(|r| r.mode == "U·H" || r.mode == "U·H·P")
        .map(|r| format!("{:.2}", r.importance_ratio))
        .collect();
    Outcome::new(
        worst <= 1e-9 && shown == ["1.00", "1.00"],
        format!("worst diagonal gap {worst:.2e}; importance column {shown:?}"),
    )
}

fn rearrangement_oracle() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for d in [5, 6] {
        let r = check_rearrangement_optimality(d, 200, 1000, SEED + d as u64).unwrap();
        ok &= r.passed && r.tolerance == 1e-9;
        parts.push(format!("d={d} worst beat {:.2e}", r.measured));
    }
    Outcome::new(ok, parts.join(", "))
}

fn reverse_bits(k: usize, bits: u32) -> usize {
    (0..bits).fold(0, |acc, b| acc | (((k >> b) & 1) << (bits - 1 - b)))
}

fn pbr_balance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (mut cases, mut violations) = (0usize, 0usize);
    for bits in 0..=7u32 {
        let d = 1usize << bits;
        // Shuffled spectrum with distinct values so rank order is nontrivial.
        let mut lambda: Vec<f64> = (0..d).map(|i| (i + 1) as f64).collect();
        for i in (1..d).rev() {
            lambda.swap(i, rng.random_range(0..=i));
        }
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| lambda[b].total_cmp(&lambda[a]));
        let map = pbr_permutation(&lambda, d).unwrap();
        let map = map.as_slice();
        for g in (0..=bits).map(|e| 1usize << e) {
            let top = d / g;
            let mut seen = vec![false; top];
            for (k, &src) in order.iter().enumerate().take(top) {
                let placed = map.iter().position(|&s| s == src).unwrap();
                let group = placed / g;
                if seen[group] || placed != reverse_bits(k, bits) {
                    violations += 1;
                }
                seen[group] = true;
            }
            cases += 1;
        }
    }
    Outcome::new(violations == 0, format!("{violations} violations over {cases} (d, G) pairs"))
}

fn bpe_arithmetic() -> Outcome {
    let full = effective_bpe(2, 128, 32, 0, 131_072).unwrap();
    let long = effective_bpe(2, 128, 32, 320, 131_072).unwrap();
    let short = effective_bpe(2, 128, 32, 320, 32_768).unwrap();
    Outcome::new(
        (full - 2.25).abs() < 1e-12 && (long - 2.28).abs() <= 0.005 && (short - 2.38).abs() <= 0.005,
        format!("{full:.4} / {long:.4} / {short:.4}"),
    )
}

fn pipeline_soundness() -> Outcome {
    let dump = generate(&SynthConfig { kv_heads: 1, ..SynthConfig::default() }).unwrap();
    let bundle = calibrate_bundle(&dump, &CalibrationOptions::default()).unwrap();
    let head = dump.head(0, 0).unwrap();
    let slot = bundle.slot(0, 0).unwrap();
    let options = EvalOptions {
        mode: EvalMode::Passthrough,
        prefill: Some(1),
        ..EvalOptions::default()
    };
    let r = evaluate_distortion(head, slot, &bundle.key_config(slot), &bundle.value_config(slot), &options).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=300);
        let d = 1usize << rng.random_range(0..=6);
        let q: Vec<f64> = gaussian(d, &mut rng).iter().map(|x| 2.0 * x).collect();
        let k = gaussian(n * d, &mut rng);
        let v = gaussian(n * d, &mut rng);
        let mut cuts: Vec<usize> = (0..rng.random_range(0..=4)).map(|_| rng.random_range(0..=n)).collect();
        cuts.extend([0, n]);
        cuts.sort_unstable();
        let segs: Vec<AttentionSegment<'_>> = cuts
            .windows(2)
            .map(|w| AttentionSegment::new(&k[w[0] * d..w[1] * d], &v[w[0] * d..w[1] * d]))
            .collect();
        let scale = 1.0 / (d as f64).sqrt();
        let a = segmented_attention(&q, &segs, scale).unwrap();
        let b = monolithic_attention(&q, &k, &v, scale).unwrap();
        let norm = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(diff / norm);
    }
    Outcome::new(
        r.decode_steps == 511 && r.decode_max_rel_err <= 1e-6 && worst <= 1e-6,
        format!(
            "passthrough worst step error {:.2e} over {} steps; worst split error {worst:.2e}",
            r.decode_max_rel_err, r.decode_steps
        ),
    )
}

fn quantizer_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut pack_failures = 0;
    let mut worst_excess = f64::NEG_INFINITY;
    for _ in 0..100_000 {
        let bits = rng.random_range(1..=8u8);
        let n = rng.random_range(0..=160usize);
        let codes: Vec<u8> = (0..n).map(|_| rng.random_range(0..(1u16 << bits)) as u8).collect();
        if unpack_codes(&pack_codes(&codes, bits), n, bits).unwrap() != codes {
            pack_failures += 1;
        }
    }
    for _ in 0..2000 {
        let g = 1usize << rng.random_range(0..=7);
        let cfg = QuantConfig::int2(g).with_bits(rng.random_range(1..=8u8));
        let row: Vec<f64> = gaussian(2 * g, &mut rng).iter().map(|x| x * 10.0).collect();
        let q = quantize_row(&row, &cfg).unwrap();
        let back = dequantize_row(&q, &cfg).unwrap();
        for ((chunk, rec), _) in row.chunks(g).zip(back.chunks(g)).zip(&q.scales) {
            let lo = chunk.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let step = (hi - lo) / cfg.q_max() as f64;
            for (x, y) in chunk.iter().zip(rec) {
                worst_excess = worst_excess.max((x - y).abs() - step / 2.0);
            }
        }
    }
    let constant = fake_quantize(&[3.25; 16], &QuantConfig::int2(8)).unwrap();
    let constant_exact = constant.iter().all(|&x| x == 3.25);
    Outcome::new(
        pack_failures == 0 && worst_excess <= 1e-9 && constant_exact,
        format!("{pack_failures} pack mismatches in 1e5 rows; max error beyond s/2 {worst_excess:.2e}; constant exact {constant_exact}"),
    )
}

/// Regression pins for the seed-7 fixture under default calibration (G = 128).
const PINNED_TRACE_K: [(&str, f64); 3] = [("oscar", 49_584.976037), ("hadamard", 58_185.566784), ("none", 308_928.904911)];
const PINNED_KL: [(&str, f64); 3] = [("oscar", 0.071462564), ("hadamard", 0.097074150), ("none", 5.158445376)];
const PIN_TOLERANCE: f64 = 1e-6;

fn ordering() -> Outcome {
    let dump = generate(&SynthConfig::default()).unwrap();
    let bundle = calibrate_bundle(&dump, &CalibrationOptions::default()).unwrap();
    let mut trace = Vec::new();
    let mut kl = Vec::new();
    for kind in [RotationKind::Oscar, RotationKind::Hadamard, RotationKind::Identity] {
        let options = EvalOptions {
            layout: CacheLayout::new(64, 256),
            mode: EvalMode::Rotation(kind),
            ..EvalOptions::default()
        };
        let s = summarize(&evaluate_dump(&dump, &bundle, None, &options).unwrap());
        trace.push(s.total_trace_residual_k);
        kl.push(s.mean_attention_kl);
    }
    let ordered = trace[0] <= trace[1] && trace[1] <= trace[2] && kl[0] <= kl[1] && kl[1] <= kl[2];
    let pinned = |got: &[f64], pins: &[(&str, f64)]| {
        got.iter().zip(pins).all(|(g, (_, p))| (g - p).abs() <= PIN_TOLERANCE * p.abs())
    };
    let pins_hold = pinned(&trace, &PINNED_TRACE_K) && pinned(&kl, &PINNED_KL);
    let head = dump.head(0, 0).unwrap();
    let align = eigenbasis_alignment(&head_query_covariance(head).unwrap(), &head.keys.gram(), 8).unwrap();
    Outcome::new(
        ordered && pins_hold,
        format!(
            "tr(E_K) oscar {:.6} <= hadamard {:.6} <= none {:.6}; KL {:.9} <= {:.9} <= {:.9}; pins {}; Q/K top-8 alignment {align:.3}",
            trace[0],
            trace[1],
            trace[2],
            kl[0],
            kl[1],
            kl[2],
            if pins_hold { "hold" } else { "differ" }
        ),
    )
}

fn alignment() -> Outcome {
    let r = check_alignment_diagnostic(128, 8, 100, SEED).unwrap();
    let mean = r.diagnostics.iter().find(|(k, _)| k == "mean_alignment").unwrap().1;
    Outcome::new(r.passed && (mean - 0.09).abs() <= 0.03, format!("mean top-8 alignment {mean:.4}"))
}

type Criterion = (&'static str, fn() -> Outcome, Option<u64>);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("exact trace identities", trace_identities, Some(10)),
        ("hadamard diagonal equalization", hadamard_equalization, None),
        ("rearrangement oracle", rearrangement_oracle, Some(30)),
        ("bit-reversal group balance", pbr_balance, None),
        ("bits-per-element arithmetic", bpe_arithmetic, None),
        ("pipeline soundness", pipeline_soundness, None),
        ("quantizer properties", quantizer_properties, None),
        ("seed-7 rotation ordering", ordering, None),
        ("alignment diagnostic", alignment, None),
    ];
    let mut failed = 0;
    for (i, (name, f, budget)) in criteria.iter().enumerate() {
        let o = timed(*f, budget.map(Duration::from_secs));
        if !o.passed {
            failed += 1;
        }
        println!("{} {}. {name}: {}", if o.passed { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
