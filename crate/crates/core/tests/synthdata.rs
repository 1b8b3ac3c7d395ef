mod common;

use std::collections::BTreeSet;

use feddg::dataset::{load_external, save_external, Sample};
use feddg::federation::{run_experiment, ExperimentConfig, Method};
use feddg::metrics::{evaluate, HausdorffKind};
use feddg::segnet::SegNetConfig;
use feddg::spectral::forward_dft;
use feddg::synthdata::{default_domain_suite, make_domain, preset, DomainStyle, SuiteConfig, AREA_RANGE, PRESETS};

fn image_bits(s: &Sample) -> Vec<u64> {
    s.image.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn generation_is_deterministic_per_seed() {
    let style = preset(1).unwrap();
    let a = make_domain(1, &style, 6, 32, 11).unwrap();
    let b = make_domain(1, &style, 6, 32, 11).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(image_bits(x), image_bits(y));
        assert_eq!(x.label, y.label);
        assert_eq!((x.domain_id, x.sample_id), (y.domain_id, y.sample_id));
    }
    let c = make_domain(1, &style, 6, 32, 12).unwrap();
    assert_ne!(image_bits(&a[0]), image_bits(&c[0]));
}

#[test]
fn invalid_styles_are_rejected() {
    let mut s = preset(0).unwrap();
    s.contrast_gain = 0.0;
    assert!(make_domain(0, &s, 3, 32, 0).is_err());
    let mut s = preset(0).unwrap();
    s.noise_sigma = -0.1;
    assert!(make_domain(0, &s, 3, 32, 0).is_err());
    assert!(make_domain(0, &preset(0).unwrap(), 0, 32, 0).is_err());
    assert!(preset(99).is_err());
    assert!(default_domain_suite(&SuiteConfig { domains: 0, ..Default::default() }).is_err());
}

#[test]
fn noiseless_untextured_images_are_piecewise_constant_plus_ramp() {
    let style = DomainStyle {
        intensity_bias: 0.2,
        contrast_gain: 0.9,
        texture_freq: 5.0,
        texture_amp: 0.0,
        noise_sigma: 0.0,
        background_gradient: (0.4, -0.3),
    };
    for s in make_domain(0, &style, 5, 32, 3).unwrap() {
        let (h, w, _) = s.image.dims();
        let masks = s.label.masks();
        let mut levels: [Vec<f64>; 3] = Default::default();
        for y in 0..h {
            for x in 0..w {
                let ramp = 0.4 * (x as f64 / w as f64 - 0.5) - 0.3 * (y as f64 / h as f64 - 0.5);
                let region = usize::from(masks[0].get(y, x)) + usize::from(masks[1].get(y, x));
                levels[region].push(s.image.at(y, x, 0) - ramp);
            }
        }
        for values in &levels {
            let (lo, hi) = values.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            assert!(hi - lo < 1e-12);
        }
    }
}

#[test]
fn labels_are_nested_and_within_area_bounds() {
    let domains = default_domain_suite(&SuiteConfig {
        n_train: 150,
        n_test: 50,
        ..Default::default()
    })
    .unwrap();
    for d in &domains {
        for s in d.all_samples() {
            let [disc, cup] = s.label.masks() else { panic!("two classes") };
            assert!(cup.points().all(|(y, x)| disc.get(y, x)));
            for m in [disc, cup] {
                let frac = m.count() as f64 / 4096.0;
                assert!((AREA_RANGE.0..=AREA_RANGE.1).contains(&frac), "area {frac}");
            }
        }
        let train: BTreeSet<u32> = d.train.iter().map(|s| s.sample_id).collect();
        let test: BTreeSet<u32> = d.test.iter().map(|s| s.sample_id).collect();
        assert!(train.is_disjoint(&test));
        assert_eq!((train.len(), test.len()), (150, 50));
    }
}

#[test]
fn suite_uses_the_preset_styles() {
    let domains = default_domain_suite(&SuiteConfig {
        n_train: 2,
        n_test: 1,
        size: 16,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(domains.len(), 4);
    for (i, d) in domains.iter().enumerate() {
        assert_eq!(d.domain_id, i as u32);
        assert_eq!(d.name, ["A", "B", "C", "D"][i]);
        let direct = make_domain(i as u32, &PRESETS[i], 3, 16, 0).unwrap();
        assert_eq!(image_bits(&d.test[0]), image_bits(&direct[2]));
    }
}

#[test]
fn foreground_area_distribution_is_shared_across_domains() {
    let domains = default_domain_suite(&SuiteConfig {
        n_train: 200,
        n_test: 0,
        ..Default::default()
    })
    .unwrap();
    for class in 0..2 {
        let means: Vec<f64> = domains
            .iter()
            .map(|d| d.train.iter().map(|s| s.label.masks()[class].count() as f64).sum::<f64>() / 200.0)
            .collect();
        let lo = means.iter().copied().fold(f64::MAX, f64::min);
        let hi = means.iter().copied().fold(f64::MIN, f64::max);
        println!("class {class} mean areas {means:?}");
        assert!((hi - lo) / lo <= 0.10, "class {class}: {means:?}");
    }
}

/// Mean spectral energy over bins whose distance from the zero frequency
/// lies within one bin of `radius`.
fn annulus_energy(samples: &[Sample], radius: f64) -> f64 {
    let mut total = 0.0;
    for s in samples {
        let (h, w, _) = s.image.dims();
        let amp = forward_dft(&s.image).unwrap().amplitude;
        for y in 0..h {
            for x in 0..w {
                let d = ((y as f64 - (h / 2) as f64).powi(2) + (x as f64 - (w / 2) as f64).powi(2)).sqrt();
                if (d - radius).abs() <= 1.0 {
                    total += amp.at(y, x, 0).powi(2);
                }
            }
        }
    }
    total / samples.len() as f64
}

#[test]
fn texture_frequency_shows_up_in_its_annulus() {
    let low = make_domain(0, &PRESETS[0], 100, 64, 0).unwrap();
    let high = make_domain(1, &PRESETS[1], 100, 64, 0).unwrap();
    assert_eq!((PRESETS[0].texture_freq, PRESETS[1].texture_freq), (2.0, 12.0));
    let at12 = annulus_energy(&high, 12.0) / annulus_energy(&low, 12.0);
    println!("energy ratio at radius 12: {at12:.2}");
    assert!(at12 >= 3.0);
    // Same geometry and appearance streams; only the texture frequency moves.
    let mut moved = PRESETS[0];
    moved.texture_freq = 12.0;
    let shifted = make_domain(0, &moved, 100, 64, 0).unwrap();
    let at2 = annulus_energy(&low, 2.0) / annulus_energy(&shifted, 2.0);
    let at12 = annulus_energy(&shifted, 12.0) / annulus_energy(&low, 12.0);
    println!("same-style ratios: radius 2 {at2:.2}, radius 12 {at12:.2}");
    // The ellipse edges put most of their energy at low radii in every
    // domain, so only the high annulus isolates the texture.
    assert!(at12 >= 3.0);
    assert!(at2 > 1.0);
}

#[test]
fn external_format_roundtrip_and_errors() {
    let domains = default_domain_suite(&SuiteConfig {
        domains: 2,
        size: 16,
        n_train: 3,
        n_test: 2,
        seed: 5,
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_external(&domains, dir.path()).unwrap();
    let loaded = load_external(dir.path()).unwrap();
    assert_eq!(loaded.len(), 2);
    for (a, b) in domains.iter().zip(&loaded) {
        assert_eq!((a.domain_id, a.train.len(), a.test.len()), (b.domain_id, b.train.len(), b.test.len()));
        for (x, y) in a.all_samples().zip(b.all_samples()) {
            assert_eq!(x.label, y.label);
            assert_eq!(x.sample_id, y.sample_id);
            for (p, q) in x.image.data().iter().zip(y.image.data()) {
                assert_eq!(*p as f32 as f64, *q);
            }
        }
    }

    // A label of the wrong size names the sample.
    let name = "A_train_0001";
    let small = default_domain_suite(&SuiteConfig {
        domains: 1,
        size: 8,
        n_train: 1,
        n_test: 0,
        seed: 0,
    })
    .unwrap();
    let lbl = feddg::dataset::encode_label(&small[0].train[0].label);
    std::fs::write(dir.path().join(format!("{name}.lbl")), lbl).unwrap();
    let err = load_external(dir.path()).unwrap_err().to_string();
    assert!(err.contains(name), "{err}");

    std::fs::remove_file(dir.path().join("B_test_0004.lbl")).unwrap();
    assert!(load_external(dir.path()).is_err());

    let empty = tempfile::tempdir().unwrap();
    assert!(load_external(empty.path()).is_err());
    std::fs::write(empty.path().join("manifest.txt"), "# nothing\n").unwrap();
    assert!(load_external(empty.path()).is_err());
}

#[test]
fn a_model_trained_on_one_domain_drops_on_another() {
    let domains = default_domain_suite(&SuiteConfig {
        size: 32,
        n_train: 20,
        n_test: 20,
        ..Default::default()
    })
    .unwrap();
    let cfg = ExperimentConfig {
        held_out: 1,
        sources: Some(vec![0]),
        method: Method::FEDAVG,
        rounds: 60,
        eval_interval: 0,
        net: SegNetConfig {
            base_width: 4,
            depth: 2,
            ..Default::default()
        },
        ..Default::default()
    };
    let report = run_experiment(&cfg, &domains).unwrap();
    let in_domain = evaluate(&report.model, &domains[0].test, HausdorffKind::Exact).unwrap();
    let gap = in_domain.dice.mean - report.final_eval.dice.mean;
    println!(
        "trained on A: Dice {:.3} on A, {:.3} on B",
        in_domain.dice.mean, report.final_eval.dice.mean
    );
    assert!(gap >= 0.05, "gap {gap:.3}");
}
