use neurofuscate::defense::{
    detect, detect_svd, eliminate_dummy, parameter_distance, recover_with_reference, DetectionReport, Method,
};
use neurofuscate::ir::Topology;
use neurofuscate::obfuscate::{inject_campaign, neuron_split, rescale_neuron, Mix, ObfuscationConfig, Primitive};
use neurofuscate::{equivalence_check, zoo, Model32, NeuronRef};

fn unit_norms(m: &Model32) -> Vec<f64> {
    let topo = Topology::of(m).unwrap();
    topo.hidden()
        .into_iter()
        .flat_map(|s| {
            (0..m.space_width(&topo, s))
                .map(|j| m.incoming_effective(&topo, s, j).iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt())
                .collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn elimination_without_reference_leaves_scales_unknown() {
    let m: Model32 = zoo::norm_cnn(1);
    let (att, _) = inject_campaign(&m, &ObfuscationConfig::new(0.3, Mix::default(), 2)).unwrap();
    let (e, _) = eliminate_dummy(&att).unwrap();
    assert_eq!(e.widths(), m.widths());
    assert!(equivalence_check(&att, &e, 100, 0, 1e-4).unwrap().pass);
    assert!(unit_norms(&e).iter().all(|n| (n - 1.0).abs() < 1e-5));
    assert!(unit_norms(&m).iter().any(|n| (n - 1.0).abs() > 1e-2));
    assert!(parameter_distance(&e, &m).unwrap() > 1e-2);
}

#[test]
fn huge_rescale_normalizes_away() {
    let m: Model32 = zoo::mlp(&[6, 8, 4], 3);
    let s = rescale_neuron(&m, NeuronRef { layer_id: 1, index: 2 }, 1e3).unwrap();
    let (a, _) = eliminate_dummy(&m).unwrap();
    let (b, _) = eliminate_dummy(&s).unwrap();
    let d = parameter_distance(&a, &b).unwrap();
    assert!(d < 1e-5, "{d}");
}

#[test]
fn split_then_eliminate_restores_width() {
    let m: Model32 = zoo::small_cnn(2);
    let (att, _) = neuron_split(&m, NeuronRef { layer_id: 3, index: 4 }, 3, 0).unwrap();
    let (e, log) = eliminate_dummy(&att).unwrap();
    assert_eq!(e.widths(), m.widths());
    assert_eq!(log.iter().map(|l| l.merged.len()).sum::<usize>(), 1);
}

#[test]
fn recovery_round_trips_all_norm_and_residual_hosts() {
    for name in ["norm_cnn", "residual_cnn", "mlp"] {
        let m: Model32 = zoo::by_name(name, 7).unwrap();
        let (att, _) = inject_campaign(&m, &ObfuscationConfig::new(0.4, Mix::default(), 9)).unwrap();
        let (_, rep) = recover_with_reference(&att, &m).unwrap();
        assert!(rep.recovered, "{name}: {:?}", rep.max_abs_diff);
    }
}

#[test]
fn clean_layers_have_few_svd_flags() {
    let mut flagged = 0;
    let mut total = 0;
    for seed in 0..20 {
        let m: Model32 = zoo::mlp(&[32, 48, 48, 10], seed);
        for id in [1, 3] {
            flagged += detect_svd(&m, id).unwrap().len();
            total += 48;
        }
    }
    let rate = flagged as f64 / total as f64;
    assert!(rate <= 0.08, "{rate}");
}

#[test]
fn rescaling_hides_clique_from_svd() {
    let (mut plain, mut scaled) = (0.0, 0.0);
    for seed in 0..8 {
        let m: Model32 = zoo::watermark_host(seed);
        let mut cfg = ObfuscationConfig::new(0.1, Mix::only(Primitive::Clique), seed);
        cfg.permute = false;
        cfg.rescale = false;
        let (a, p) = inject_campaign(&m, &cfg).unwrap();
        plain += detect(&a, Method::Svd, Some(&p), 0).unwrap().rate(Primitive::Clique).unwrap();
        cfg.rescale = true;
        let (a, p) = inject_campaign(&m, &cfg).unwrap();
        scaled += detect(&a, Method::Svd, Some(&p), 0).unwrap().rate(Primitive::Clique).unwrap();
    }
    assert!(scaled <= plain, "rescaled {scaled} vs plain {plain}");
}

#[test]
fn detection_report_serializes() {
    let m: Model32 = zoo::watermark_host(1);
    let (a, p) = inject_campaign(&m, &ObfuscationConfig::new(0.1, Mix::only(Primitive::Zero), 1)).unwrap();
    let r = detect(&a, Method::Cluster, Some(&p), 3).unwrap();
    let back: DetectionReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(back, r);
    assert!(r.rates.values().all(|x| (0.0..=1.0).contains(&x.rate)));
}
