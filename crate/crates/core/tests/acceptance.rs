//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on
//! any failure.

use std::process::ExitCode;
use std::thread;
use std::time::Instant;

use neurofuscate::defense::{detect, eliminate_dummy, recover_with_reference, Method};
use neurofuscate::inference::equivalence_check;
use neurofuscate::obfuscate::{
    inject_campaign, kernel_expand, neuron_clique_inject, neuron_split, neuron_zero_inject, permute_layer,
    rescale_neuron, ExpandMode, Mix, ObfuscationConfig, Primitive, ZeroSide,
};
use neurofuscate::verify::{scaled_ber, verify, Decision};
use neurofuscate::watermark::{embed, extract, BitString, EmbedConfig, Scheme, WatermarkKey};
use neurofuscate::{zoo, Error, Model32, NeuronRef};
use rand::seq::SliceRandom;

const TOL: f64 = 1e-4;
const SAMPLES: usize = 100;
const UCHIDA_THETA: f64 = 0.4386;

struct Outcome {
    pass: bool,
    summary: String,
}

fn watermarked(seed: u64, scheme: Scheme) -> (Model32, WatermarkKey, BitString) {
    let host = zoo::watermark_host::<f32>(seed);
    let msg = BitString::random(64, seed ^ 0xb175).unwrap();
    let (m, key) = embed(&host, scheme, None, &msg, &EmbedConfig::default(), seed).unwrap();
    (m, key, msg)
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut neurofuscate::rng::seeded(seed));
    p
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn equivalence_suite() -> Outcome {
    let start = Instant::now();
    let mut cases: Vec<(String, Model32, Model32)> = Vec::new();
    let models: Vec<(&str, Model32, Vec<u32>)> = vec![
        ("cnn", zoo::small_cnn(1), vec![1, 3]),
        ("mlp", zoo::mlp(&[16, 32, 32, 32, 4], 2), vec![1, 3, 5]),
        ("norm_cnn", zoo::norm_cnn(3), vec![1, 4]),
        ("residual_cnn", zoo::residual_cnn(4), vec![1, 3]),
    ];
    for (name, m, hidden) in &models {
        for &l in hidden {
            let seed = l as u64 * 31;
            let width = m.widths()[&l];
            for side in [ZeroSide::Incoming, ZeroSide::Outgoing, ZeroSide::Random] {
                let (a, _) = neuron_zero_inject(m, l, 2, side, seed).unwrap();
                cases.push((format!("{name}/{l} zero {side:?}"), m.clone(), a));
            }
            let (clique, _) = neuron_clique_inject(m, l, 3, seed).unwrap();
            cases.push((format!("{name}/{l} clique"), m.clone(), clique.clone()));
            let (split, _) = neuron_split(m, NeuronRef { layer_id: l, index: 0 }, 2, seed).unwrap();
            cases.push((format!("{name}/{l} split"), m.clone(), split));
            for lambda in [0.3, 2.0] {
                let r = rescale_neuron(m, NeuronRef { layer_id: l, index: 1 }, lambda).unwrap();
                cases.push((format!("{name}/{l} rescale {lambda}"), m.clone(), r));
            }
            let p = permute_layer(m, l, &shuffled(width, seed)).unwrap();
            cases.push((format!("{name}/{l} permute"), m.clone(), p));
            let mut composed = rescale_neuron(&clique, NeuronRef { layer_id: l, index: width }, 2.0).unwrap();
            composed = permute_layer(&composed, l, &shuffled(width + 3, seed + 1)).unwrap();
            cases.push((format!("{name}/{l} clique+rescale+permute"), m.clone(), composed));
        }
        for alpha in [0.05, 0.2, 0.5] {
            let mut cfg = ObfuscationConfig::new(alpha, Mix::default(), 7);
            let (a, _) = inject_campaign(m, &cfg).unwrap();
            cases.push((format!("{name} campaign a={alpha}"), m.clone(), a));
            cfg.mix = "1:1:1".parse().unwrap();
            cfg.kernel_growth = 2;
            let (a, _) = inject_campaign(m, &cfg).unwrap();
            cases.push((format!("{name} campaign a={alpha} all primitives + kernel growth"), m.clone(), a));
        }
    }
    let cnn = &models[0].1;
    for l in [1, 3] {
        let a = kernel_expand(cnn, l, 5, 5, ExpandMode::ZeroPad, 0).unwrap();
        cases.push((format!("cnn/{l} kernel zero-pad"), cnn.clone(), a));
    }
    let mut twins = cnn.clone();
    for j in 0..8 {
        twins = neuron_split(&twins, NeuronRef { layer_id: 1, index: j }, 1, j as u64).unwrap().0;
    }
    let paired = kernel_expand(&twins, 3, 5, 5, ExpandMode::PairedNonzero, 9).unwrap();
    cases.push(("cnn/3 kernel paired-nonzero".into(), cnn.clone(), paired));

    let mut failed = Vec::new();
    let mut worst = 0.0f64;
    for (i, (name, a, b)) in cases.iter().enumerate() {
        let r = equivalence_check(a, b, SAMPLES, i as u64, TOL).unwrap();
        worst = worst.max(r.max_abs_dev);
        if !r.pass {
            failed.push(format!("{name} ({:.2e})", r.max_abs_dev));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: failed.is_empty() && secs < 60.0,
        summary: format!(
            "{}/{} transforms equivalent, worst deviation {worst:.2e}, {secs:.1}s{}",
            cases.len() - failed.len(),
            cases.len(),
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    }
}

fn round_trip() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for scheme in Scheme::ALL {
        let (m, key, msg) = watermarked(11, scheme);
        let got = extract(&m, &key).unwrap();
        let ber = got.hamming(&msg).unwrap() as f64 / 64.0;
        pass &= ber == 0.0 && got.len() == 64;
        parts.push(format!("{scheme} BER {ber}"));
    }
    Outcome {
        pass,
        summary: parts.join(", "),
    }
}

fn blocked_verification() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for scheme in Scheme::ALL {
        let (m, key, _) = watermarked(5, scheme);
        let (att, _) = inject_campaign(&m, &ObfuscationConfig::new(0.05, Mix::only(Primitive::Clique), 21)).unwrap();
        let r = extract(&att, &key);
        let ok = match scheme {
            Scheme::Greedy => r.as_ref().is_ok_and(|b| b.len() == 64),
            _ => matches!(r, Err(Error::DimensionMismatch { .. })),
        };
        pass &= ok;
        let state = match &r {
            Ok(b) => format!("{} bits", b.len()),
            Err(e) if e.is_dimension_mismatch() => "DimensionMismatch".into(),
            Err(e) => format!("error {e}"),
        };
        parts.push(format!("{scheme} {state}"));
    }
    Outcome {
        pass,
        summary: parts.join(", "),
    }
}

const ALPHAS: [f64; 5] = [0.01, 0.05, 0.1, 0.2, 0.5];

fn max_first_sweep() -> Outcome {
    // [seed][primitive][alpha] -> (scaled BER, utility delta)
    let runs: Vec<Vec<Vec<(f64, f64)>>> = thread::scope(|s| {
        let hs: Vec<_> = (0..5u64)
            .map(|seed| {
                s.spawn(move || {
                    let (m, key, msg) = watermarked(seed, Scheme::Uchida);
                    [Primitive::Clique, Primitive::Split]
                        .iter()
                        .map(|&p| {
                            ALPHAS
                                .iter()
                                .map(|&a| {
                                    let cfg = ObfuscationConfig::new(a, Mix::only(p), seed + 100);
                                    let (att, _) = inject_campaign(&m, &cfg).unwrap();
                                    let r = verify(&att, &key, &msg, UCHIDA_THETA, Some(&m));
                                    (r.scaled_ber.unwrap_or(f64::NAN), r.utility_delta.unwrap_or(f64::NAN))
                                })
                                .collect()
                        })
                        .collect()
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut pass = true;
    let mut parts = Vec::new();
    let mut worst_delta = 0.0f64;
    for (pi, p) in ["clique", "split"].iter().enumerate() {
        let curve: Vec<f64> = (0..ALPHAS.len())
            .map(|ai| mean(&runs.iter().map(|r| r[pi][ai].0).collect::<Vec<_>>()))
            .collect();
        for r in &runs {
            worst_delta = r[pi].iter().fold(worst_delta, |w, x| w.max(x.1));
        }
        let cross = ALPHAS.iter().zip(&curve).find(|(_, &b)| b > 0.5).map(|(a, _)| *a);
        pass &= cross.is_some_and(|a| a <= 0.1);
        let pts: Vec<String> = ALPHAS.iter().zip(&curve).map(|(a, b)| format!("{a}:{b:.3}")).collect();
        parts.push(format!(
            "{p} mean scaled BER [{}] first crossing {}",
            pts.join(" "),
            cross.map_or("none".into(), |a| format!("a={a}"))
        ));
    }
    pass &= worst_delta <= TOL;
    parts.push(format!("max utility delta {worst_delta:.2e}"));
    Outcome {
        pass,
        summary: parts.join("; "),
    }
}

fn detection_ordering() -> Outcome {
    // [seed][method][primitive]
    let runs: Vec<Vec<Vec<f64>>> = thread::scope(|s| {
        let hs: Vec<_> = (0..10u64)
            .map(|seed| {
                s.spawn(move || {
                    let (m, _, _) = watermarked(seed, Scheme::Uchida);
                    let attacked: Vec<_> = Primitive::ALL
                        .iter()
                        .map(|&p| inject_campaign(&m, &ObfuscationConfig::new(0.1, Mix::only(p), seed + 50)).unwrap())
                        .collect();
                    [Method::Cluster, Method::Svd]
                        .iter()
                        .map(|&method| {
                            Primitive::ALL
                                .iter()
                                .zip(&attacked)
                                .map(|(&p, (att, plan))| detect(att, method, Some(plan), seed).unwrap().rate(p).unwrap())
                                .collect()
                        })
                        .collect()
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut pass = true;
    let mut parts = Vec::new();
    for (mi, method) in ["cluster", "svd"].iter().enumerate() {
        let r: Vec<f64> = (0..3).map(|pi| mean(&runs.iter().map(|x| x[mi][pi]).collect::<Vec<_>>())).collect();
        let (zero, clique, split) = (r[0], r[1], r[2]);
        pass &= zero >= clique && clique >= split && zero >= 0.9 && split <= zero - 0.3;
        parts.push(format!("{method} zero {zero:.2} clique {clique:.2} split {split:.2}"));
    }
    Outcome {
        pass,
        summary: parts.join("; "),
    }
}

fn elimination() -> Outcome {
    let runs: Vec<(bool, bool, f64, Option<f64>, bool)> = thread::scope(|s| {
        let hs: Vec<_> = (0..5u64)
            .map(|seed| {
                s.spawn(move || {
                    let (m, key, msg) = watermarked(seed, Scheme::Uchida);
                    let cfg = ObfuscationConfig::new(0.1, Mix::default(), seed + 300);
                    let (att, _) = inject_campaign(&m, &cfg).unwrap();
                    let (elim, _) = eliminate_dummy(&att).unwrap();
                    let widths = elim.widths() == m.widths();
                    let equiv = equivalence_check(&att, &elim, SAMPLES, seed, TOL).unwrap().pass;
                    let scaled = verify(&elim, &key, &msg, UCHIDA_THETA, None).scaled_ber.unwrap_or(f64::NAN);
                    let (rec, rep) = recover_with_reference(&att, &m).unwrap();
                    let v = verify(&rec, &key, &msg, UCHIDA_THETA, None);
                    (widths, equiv, scaled, v.raw_ber, rep.recovered)
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let widths = runs.iter().all(|r| r.0);
    let equiv = runs.iter().all(|r| r.1);
    let scaled: Vec<f64> = runs.iter().map(|r| r.2).collect();
    let recovered = runs.iter().all(|r| r.3 == Some(0.0) && r.4);
    let pass = widths && equiv && mean(&scaled) > 0.5 && recovered;
    let per: Vec<String> = scaled.iter().map(|b| format!("{b:.3}")).collect();
    Outcome {
        pass,
        summary: format!(
            "widths restored {widths}, equivalent {equiv}, scaled BER without reference mean {:.3} [{}], \
             with reference BER 0 and exact {recovered}",
            mean(&scaled),
            per.join(" ")
        ),
    }
}

fn max_first_selectivity() -> Outcome {
    let bers: Vec<f64> = thread::scope(|s| {
        let hs: Vec<_> = (0..5u64)
            .map(|seed| {
                s.spawn(move || {
                    let (m, key, msg) = watermarked(seed, Scheme::Uchida);
                    let cfg = ObfuscationConfig::new(0.1, Mix::only(Primitive::Zero), seed + 700).without_camouflage();
                    let (att, _) = inject_campaign(&m, &cfg).unwrap();
                    let r = verify(&att, &key, &msg, UCHIDA_THETA, None);
                    assert_ne!(r.decision, Decision::Inexecutable, "{r:?}");
                    r.raw_ber.unwrap()
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let restored = bers.iter().filter(|&&b| b < UCHIDA_THETA).count();
    let per: Vec<String> = bers.iter().map(|b| format!("{b:.3}")).collect();
    Outcome {
        pass: restored >= 4,
        summary: format!(
            "raw BER after Max-First [{}], {restored}/5 below theta (scaled max {:.3})",
            per.join(" "),
            scaled_ber(bers.iter().cloned().fold(0.0, f64::max), UCHIDA_THETA).unwrap()
        ),
    }
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("equivalence master suite", equivalence_suite),
        ("round-trip embedding", round_trip),
        ("blocked verification", blocked_verification),
        ("max-first alpha sweep", max_first_sweep),
        ("detection ordering", detection_ordering),
        ("elimination", elimination),
        ("max-first selectivity", max_first_selectivity),
    ];
    let mut all = true;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let o = f();
        all &= o.pass;
        println!("criterion {} {} {name}: {}", i + 1, if o.pass { "PASS" } else { "FAIL" }, o.summary);
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
