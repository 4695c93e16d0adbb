use geopfn::geodata::{
    generate_site, generate_site_with_truth, read_csv, split_verification, write_csv, BoreholeRecord, GeoError, Param,
    Region, SiteTable, SynthSiteConfig, Zone, N_PARAMS,
};
use geopfn::prior::IntRange;
use proptest::prelude::*;

const HEADER: &str = "site_id,borehole_id,x,y,depth,Sr,gamma_t,e,LL,PL,w,su,Eu,sigma_p,Cc,cv";

fn parse(text: &str) -> Result<SiteTable, GeoError> {
    read_csv(text.as_bytes(), "test")
}

#[test]
fn one_full_record_loads_without_masks() {
    let t = parse(&format!("{HEADER}\nS,B1,10,20,3.5,98,15.6,2.1,70,30,80,25,3000,60,0.9,120\n")).unwrap();
    assert_eq!(t.len(), 1);
    let r = &t.records()[0];
    assert!(r.params.iter().all(Option::is_some));
    assert_eq!(r.get(Param::Su), Some(25.0));
    assert_eq!(r.depth, 3.5);
}

#[test]
fn empty_cell_is_missing() {
    let t = parse(&format!("{HEADER}\nS,B1,10,20,3.5,98,15.6,2.1,70,30,80,,3000,60,0.9,120\n")).unwrap();
    assert_eq!(t.records()[0].get(Param::Su), None);
    assert_eq!(t.records()[0].missing_mechanical(), vec![Param::Su]);
}

#[test]
fn plastic_limit_above_liquid_limit_names_the_line() {
    let err = parse(&format!("{HEADER}\nS,B1,0,0,1,98,15,2,70,30,80,,,,,\nS,B1,0,0,2,98,15,2,40,60,80,,,,,\n")).unwrap_err();
    match err {
        GeoError::Invariant { line, message } => {
            assert_eq!(line, 3);
            assert!(message.contains("PL"), "{message}");
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn unknown_column_is_rejected() {
    let text = format!("{}\n", HEADER.replace("sigma_p", "sigma_v"));
    assert!(matches!(parse(&text), Err(GeoError::Header(m)) if m.contains("sigma_v")));
}

#[test]
fn unparsable_number_names_line_and_column() {
    let err = parse(&format!("{HEADER}\nS,B1,0,0,1,98,15,2,70,30,80,abc,,,,\n")).unwrap_err();
    match err {
        GeoError::Cell { line, column, .. } => assert_eq!((line, column.as_str()), (2, "su")),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn duplicate_key_is_rejected() {
    let row = "S,B1,0,0,1,98,15,2,70,30,80,,,,,";
    assert!(matches!(parse(&format!("{HEADER}\n{row}\n{row}\n")), Err(GeoError::Duplicate { line: 3, .. })));
}

#[test]
fn negative_values_violate_invariants() {
    assert!(matches!(parse(&format!("{HEADER}\nS,B1,0,0,1,-98,15,2,70,30,80,,,,,\n")), Err(GeoError::Invariant { .. })));
    assert!(matches!(parse(&format!("{HEADER}\nS,B1,0,0,-1,98,15,2,70,30,80,,,,,\n")), Err(GeoError::Invariant { .. })));
}

fn degenerate_config() -> SynthSiteConfig {
    let mut cfg = SynthSiteConfig { seed: 4, ..SynthSiteConfig::default() };
    for m in cfg.params.iter_mut() {
        m.noise_sd = 0.0;
        m.missing_rate = 0.0;
    }
    for row in cfg.loadings.iter_mut() {
        row.iter_mut().for_each(|v| *v = 0.0);
    }
    cfg
}

#[test]
fn noiseless_generator_is_a_function_of_depth_per_borehole() {
    let cfg = degenerate_config();
    let t = generate_site(&cfg).unwrap();
    let su = cfg.param(Param::Su);
    for id in t.borehole_ids() {
        let offsets: Vec<f64> = t.borehole(&id).map(|r| r.get(Param::Su).unwrap().ln() - su.trend(r.depth)).collect();
        assert!(offsets.len() >= 2);
        for o in &offsets {
            assert!((o - offsets[0]).abs() < 1e-8, "{id}: {o} vs {}", offsets[0]);
        }
    }
}

#[test]
fn same_seed_gives_identical_tables() {
    let cfg = SynthSiteConfig { seed: 9, ..SynthSiteConfig::default() };
    assert_eq!(generate_site_with_truth(&cfg).unwrap(), generate_site_with_truth(&cfg).unwrap());
    let other = generate_site(&SynthSiteConfig { seed: 10, ..cfg.clone() }).unwrap();
    assert_ne!(generate_site(&cfg).unwrap(), other);
}

fn large_config(seed: u64) -> SynthSiteConfig {
    SynthSiteConfig {
        zones: vec![Zone { region: Region { x_min: 0.0, x_max: 5000.0, y_min: 0.0, y_max: 5000.0 }, n_boreholes: 800 }],
        records_per_borehole: IntRange::new(12, 14),
        seed,
        ..SynthSiteConfig::default()
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn log_correlation_matches_the_loading_matrix() {
    let mut cfg = large_config(2);
    for m in cfg.params.iter_mut() {
        m.slope = 0.0;
        m.log_depth = 0.0;
        m.spatial = 0.0;
        m.borehole_sd = 0.0;
    }
    let (_, complete) = generate_site_with_truth(&cfg).unwrap();
    assert!(complete.len() >= 10_000);
    let logs = |p: Param| -> Vec<f64> { complete.records().iter().map(|r| r.get(p).unwrap().ln()).collect() };
    let (su, sp) = (Param::Su.index(), Param::SigmaP.index());
    // Implied covariance: loadings·loadingsᵀ plus the diagonal noise.
    let cov = |i: usize, j: usize| -> f64 {
        let shared: f64 = cfg.loadings[i].iter().zip(&cfg.loadings[j]).map(|(a, b)| a * b).sum();
        shared + if i == j { cfg.params[i].noise_sd.powi(2) } else { 0.0 }
    };
    let implied = cov(su, sp) / (cov(su, su) * cov(sp, sp)).sqrt();
    let empirical = pearson(&logs(Param::Su), &logs(Param::SigmaP));
    assert!((empirical - implied).abs() < 0.05, "empirical {empirical} implied {implied}");
}

#[test]
fn mechanical_missing_rates_match_the_profile() {
    let cfg = large_config(3);
    let t = generate_site(&cfg).unwrap();
    assert!(t.len() >= 10_000);
    for p in Param::MECHANICAL {
        let missing = t.records().iter().filter(|r| r.get(p).is_none()).count() as f64 / t.len() as f64;
        let target = cfg.param(p).missing_rate;
        assert!((missing - target).abs() < 0.02, "{p}: {missing} vs {target}");
    }
}

#[test]
fn invalid_generator_configs_are_rejected() {
    let mut cfg = SynthSiteConfig::default();
    cfg.params[3].missing_rate = 1.0;
    assert!(matches!(generate_site(&cfg), Err(GeoError::InvalidConfig(_))));
    let mut cfg = SynthSiteConfig::default();
    cfg.loadings[0][0] = f64::NAN;
    assert!(matches!(generate_site(&cfg), Err(GeoError::InvalidConfig(_))));
}

#[test]
fn split_partitions_the_table() {
    let t = generate_site(&SynthSiteConfig { seed: 1, ..SynthSiteConfig::default() }).unwrap();
    let all = Region { x_min: -1.0, x_max: 1e9, y_min: -1.0, y_max: 1e9 };
    let (bid, ver) = split_verification(&t, &all).unwrap();
    assert!(bid.is_empty());
    assert_eq!(ver.len(), t.len());

    let none = Region { x_min: -10.0, x_max: -5.0, y_min: -10.0, y_max: -5.0 };
    assert!(matches!(split_verification(&t, &none), Err(GeoError::EmptyRegion)));

    let half = Region { x_min: 0.0, x_max: 1500.0, y_min: 0.0, y_max: 3000.0 };
    let (bid, ver) = split_verification(&t, &half).unwrap();
    assert_eq!(bid.len() + ver.len(), t.len());
    assert!(ver.records().iter().all(|r| r.x <= 1500.0));
    assert!(bid.records().iter().all(|r| r.x > 1500.0));
}

fn round_trip(t: &SiteTable) -> SiteTable {
    let mut buf = Vec::new();
    write_csv(t, &mut buf).unwrap();
    read_csv(buf.as_slice(), t.label.clone()).unwrap()
}

#[test]
fn generated_sites_round_trip_exactly() {
    let t = generate_site(&SynthSiteConfig { seed: 12, ..SynthSiteConfig::default() }).unwrap();
    assert_eq!(round_trip(&t), t);
}

fn record_strategy() -> impl Strategy<Value = BoreholeRecord> {
    let value = prop_oneof![Just(None), (1e-6f64..1e6).prop_map(Some)];
    (0.0f64..1e4, 0.0f64..1e4, 0.0f64..100.0, proptest::collection::vec(value, N_PARAMS)).prop_map(|(x, y, depth, vals)| {
        let mut params = [None; N_PARAMS];
        params.copy_from_slice(&vals);
        if let (Some(ll), Some(pl)) = (params[Param::LL.index()], params[Param::PL.index()]) {
            params[Param::PL.index()] = Some(pl.min(ll));
        }
        BoreholeRecord { site_id: "S,1".into(), borehole_id: "B \"1\"".into(), x, y, depth, params }
    })
}

proptest! {
    #[test]
    fn csv_round_trip_preserves_values_and_masks(records in proptest::collection::vec(record_strategy(), 0..20)) {
        let mut records = records;
        for (i, r) in records.iter_mut().enumerate() {
            r.depth += i as f64 * 1000.0;
        }
        let t = SiteTable::new("rt", records).unwrap();
        prop_assert_eq!(round_trip(&t), t);
    }

    #[test]
    fn generated_records_satisfy_invariants(seed in 0u64..1000) {
        let t = generate_site(&SynthSiteConfig { seed, ..SynthSiteConfig::default() }).unwrap();
        for r in t.records() {
            prop_assert!(r.validate().is_ok());
        }
    }
}
