mod common;

use copanet::analysis::*;
use copanet::data::{make_synthetic, Dataset, NormalizationMode, Normalizer};
use copanet::model::{Model, NetworkConfig, Variant};
use copanet::selfcheck::randomize_params;
use copanet::tensor::RoutingMask;
use copanet::Error;
use rand::Rng;

fn config(k: usize) -> NetworkConfig {
    NetworkConfig {
        depth: 20,
        k,
        widths: [4, 6, 8],
        mids: [2, 3, 4],
        num_classes: 3,
        ..NetworkConfig::default()
    }
}

fn setup(k: usize, seed: u64) -> (Model<f64>, Dataset, Normalizer) {
    let mut model = Model::<f64>::build(&config(k)).unwrap();
    randomize_params(&mut model.params, &mut common::rng(seed));
    let ds = make_synthetic(3, 4, seed).unwrap();
    let norm = Normalizer::fit(&ds, NormalizationMode::MeanStd).unwrap();
    (model, ds, norm)
}

fn set_params(model: &mut Model<f64>, f: impl Fn(&str, &mut f64)) {
    for id in model.params.ids().collect::<Vec<_>>() {
        let name = model.params.spec(id).name.clone();
        for v in model.params.get_mut(id).data_mut() {
            f(&name, v);
        }
    }
}

#[test]
fn forced_winner_gives_full_preference() {
    let (mut model, ds, norm) = setup(2, 1);
    // Pathway 1 contributes nothing; pathway 0's last conv only sees ReLU
    // output through positive weights, so its residual is never negative.
    set_params(&mut model, |name, v| {
        if name.contains(".path1.") {
            *v = 0.0;
        } else if name.contains(".path0.conv2") {
            *v = v.abs();
        }
    });
    let profile = trace(&mut model, &ds, &norm, 2, 5).unwrap();
    assert_eq!((profile.units, profile.maps, profile.categories.len()), (2, 8, 3));
    for u in 0..2 {
        for m in 0..8 {
            for c in 0..3 {
                assert_eq!(profile.preference(u, m, c), Some(1.0));
            }
        }
    }
}

#[test]
fn profile_equals_recount_from_masks() {
    let (mut model, _, _) = setup(2, 2);
    let ds = make_synthetic(3, 11, 5).unwrap().subset(&(0..32).collect::<Vec<_>>());
    let norm = Normalizer::fit(&ds, NormalizationMode::MeanStd).unwrap();
    for block in 0..3 {
        let profile = trace(&mut model, &ds, &norm, block, 6).unwrap();
        let maps = [4, 6, 8][block];
        // Brute force: one sample at a time, counting every element.
        let mut counts = vec![[0u64; 2]; 2 * maps * 3];
        for i in 0..ds.len() {
            let masks = capture_masks(&mut model, &ds, &norm, block, &[i]).unwrap();
            for (u, mask) in masks.iter().enumerate() {
                let plane = mask.shape[2] * mask.shape[3];
                for (e, &w) in mask.winners.iter().enumerate() {
                    let map = e / plane;
                    counts[(u * maps + map) * 3 + ds.label(i)][w as usize] += 1;
                }
            }
        }
        let mut mixed = false;
        for u in 0..2 {
            for m in 0..maps {
                for c in 0..3 {
                    let want = counts[(u * maps + m) * 3 + c];
                    assert_eq!(profile.wins(u, m, c), &want);
                    let total = (want[0] + want[1]) as f64;
                    assert_eq!(profile.win_fraction(u, m, c, 0), Some(want[0] as f64 / total));
                    let sum = profile.win_fraction(u, m, c, 0).unwrap() + profile.win_fraction(u, m, c, 1).unwrap();
                    assert!((sum - 1.0).abs() < 1e-15);
                    mixed |= want[0] > 0 && want[1] > 0;
                }
            }
        }
        assert!(mixed, "both pathways should win somewhere");
    }
}

#[test]
fn trace_ignores_order_and_leaves_model_untouched() {
    let (mut model, ds, norm) = setup(2, 3);
    let before = model.clone();
    let a = trace(&mut model, &ds, &norm, 1, 4).unwrap();
    assert_eq!(model.params.values(), before.params.values());
    assert_eq!(model.params.bn_states(), before.params.bn_states());
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.reverse();
    order.swap(0, 5);
    let b = trace(&mut model, &ds.subset(&order), &norm, 1, 5).unwrap();
    assert_eq!(a, b);
}

#[test]
fn single_pathway_models_cannot_be_traced() {
    let (mut model, ds, norm) = setup(1, 4);
    assert!(matches!(trace(&mut model, &ds, &norm, 2, 4), Err(Error::Config(_))));
}

fn random_profile(units: usize, maps: usize, cats: usize, seed: u64) -> RoutingProfile {
    let mut r = common::rng(seed);
    let names = (0..cats).map(|c| format!("c{c}")).collect();
    let mut p = RoutingProfile::new(units, maps, 2, names);
    for u in 0..units {
        let groups: Vec<usize> = (0..6).map(|i| i % cats).collect();
        let mask = RoutingMask {
            unit: u,
            pathways: 2,
            shape: vec![6, maps, 2, 2],
            winners: (0..6 * maps * 4).map(|_| r.random_range(0..2)).collect(),
        };
        p.accumulate(&mask, &groups).unwrap();
    }
    p
}

#[test]
fn distance_properties() {
    let p = random_profile(3, 5, 3, 1);
    assert_eq!(profile_distance(&p, "c1", "c1").unwrap(), 0.0);
    let ab = profile_distance(&p, "c0", "c2").unwrap();
    assert_eq!(ab, profile_distance(&p, "c2", "c0").unwrap());
    assert!(ab > 0.0);
    // Independent recomputation from preferences.
    let mut sum = 0.0;
    for u in 0..3 {
        for m in 0..5 {
            sum += (p.preference(u, m, 0).unwrap() - p.preference(u, m, 2).unwrap()).abs();
        }
    }
    assert!((ab - sum / 15.0).abs() < 1e-12);
    assert!(matches!(profile_distance(&p, "c0", "nope"), Err(Error::Usage(_))));
}

#[test]
fn csv_round_trip_and_schema() {
    let p = random_profile(2, 3, 4, 2);
    let mut buf = Vec::new();
    p.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().next(), Some("unit,map,category,wins_p0,wins_p1,total,preference"));
    assert_eq!(text.lines().count(), 1 + 2 * 3 * 4);
    assert_eq!(RoutingProfile::read_csv(buf.as_slice()).unwrap(), p);
}

#[test]
fn heatmap_layout_and_gray_levels() {
    let mut p = RoutingProfile::new(18, 2, 2, (0..10).map(|c| format!("c{c}")).collect());
    // Map 0: every cell tied. Map 1: pathway 0 wins for even categories only.
    for u in 0..18 {
        let winners: Vec<u8> = (0..10u8).flat_map(|c| [0, 1, c % 2, c % 2]).collect();
        let mask = RoutingMask { unit: u, pathways: 2, shape: vec![10, 2, 1, 2], winners };
        p.accumulate(&mask, &(0..10).collect::<Vec<_>>()).unwrap();
    }
    let header = b"P5\n10 18\n255\n";
    let tied = p.heatmap_pgm(0);
    assert_eq!(&tied[..header.len()], header);
    assert_eq!(tied.len(), header.len() + 180);
    assert!(tied[header.len()..].iter().all(|&g| g == 128));
    let striped = p.heatmap_pgm(1);
    for u in 0..18 {
        let row = &striped[header.len() + u * 10..header.len() + (u + 1) * 10];
        let want: Vec<u8> = (0..10).map(|c| if c % 2 == 0 { 255 } else { 0 }).collect();
        assert_eq!(row, &want[..], "unit {u}");
    }
    assert_eq!(preference_gray(Some(-1.0)), 0);
    assert_eq!(preference_gray(Some(0.05)), 128);
    assert_eq!(preference_gray(None), 128);
    let ranked = p.rank_maps();
    assert_eq!((ranked[0].0, ranked[1]), (1, (0, 0.0)));
    assert!(ranked[0].1 > 0.0);

    let dir = tempfile::tempdir().unwrap();
    let files = p.export_heatmaps(dir.path(), 1).unwrap();
    assert_eq!(files.len(), 1);
    assert_eq!(std::fs::read(&files[0]).unwrap(), striped);
}

#[test]
fn reuse_report_norms() {
    let cfg = NetworkConfig { variant: Variant::R, ..config(2) };
    let mut model = Model::<f64>::build(&cfg).unwrap();
    let report = reuse_report(&model).unwrap();
    assert!(report.norms.iter().all(|&n| n == 0.0));

    let fc = model.network.fc_weight;
    model.params.get_mut(fc).data_mut().fill(1.0);
    let report = reuse_report(&model).unwrap();
    for (b, width) in [4.0, 6.0, 8.0].into_iter().enumerate() {
        for c in 0..3 {
            assert_eq!(report.norm(b, c), width);
        }
        assert_eq!(report.block_total(b), 3.0 * width);
    }

    let mut r = common::rng(7);
    for v in model.params.get_mut(fc).data_mut() {
        *v = r.random_range(-1.0..1.0);
    }
    let report = reuse_report(&model).unwrap();
    let w = model.params.get(fc).data().to_vec();
    // Block b owns classifier rows [start_b, start_b + width_b) of a 18x3
    // matrix stored row-major.
    let starts = [0usize, 4, 10];
    let widths = [4usize, 6, 8];
    for b in 0..3 {
        for c in 0..3 {
            let flat: Vec<usize> = (0..18 * 3).filter(|i| i % 3 == c && (starts[b]..starts[b] + widths[b]).contains(&(i / 3))).collect();
            let want: f64 = flat.iter().map(|&i| w[i].abs()).sum();
            assert_eq!(report.norm(b, c), want);
        }
    }
    let mut buf = Vec::new();
    report.write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 3 * 4);

    let plain = Model::<f64>::build(&config(2)).unwrap();
    assert!(matches!(reuse_report(&plain), Err(Error::Config(_))));
}
