use segrefine_core::io::read_soft_mask;
use segrefine_core::synth::{
    coarse_seed, label_components, list_items, load_item, severity_tag, write_dataset, Phantom,
    REGIMES,
};
use segrefine_core::{
    degrade_mask, dice, double_threshold, generate_phantom, severity_for_regime, DegradeConfig,
    PhantomConfig, SoftMask,
};

fn phantom(seed: u64) -> Phantom<f64> {
    generate_phantom(&PhantomConfig::default().with_seed(seed)).unwrap()
}

#[test]
fn pathology_fraction_in_band_and_contained() {
    for seed in 0..40 {
        let ph = phantom(seed);
        let f = ph.pathology_fraction();
        assert!((0.005..=0.017).contains(&f), "seed {seed}: fraction {f}");
        let (w, h) = ph.tendon.dims();
        for y in 0..h {
            for x in 0..w {
                assert!(!ph.pathology.get(x, y) || ph.tendon.get(x, y));
            }
        }
        let (_, n) = label_components(&ph.pathology);
        assert!(
            (1..=3).contains(&n) && n <= ph.blobs,
            "seed {seed}: {n} components, {} blobs",
            ph.blobs
        );
    }
}

#[test]
fn phantom_is_deterministic_and_seed_sensitive() {
    let a = phantom(7);
    let b = phantom(7);
    assert_eq!(a.image, b.image);
    assert_eq!(a.pathology, b.pathology);
    assert_ne!(phantom(8).image, a.image);
    for &v in a.image.intensity() {
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn severity_zero_is_identity() {
    let ph = phantom(3);
    let soft: SoftMask =
        degrade_mask(&ph.pathology, &DegradeConfig::new(0.0, 11).unwrap()).unwrap();
    assert_eq!(soft, SoftMask::from_indicator(&ph.pathology));
}

#[test]
fn severity_one_peak_is_bounded() {
    for seed in 0..10 {
        let ph = phantom(seed);
        let soft: SoftMask =
            degrade_mask(&ph.pathology, &DegradeConfig::new(1.0, seed).unwrap()).unwrap();
        // amplitude 0.4 plus 3 sigma of the 0.05 noise
        assert!(
            soft.max_value() <= 0.55,
            "seed {seed}: peak {}",
            soft.max_value()
        );
    }
}

#[test]
fn degrade_parameters_follow_severity() {
    let c = DegradeConfig::new(0.5, 0).unwrap();
    assert_eq!(c.blur_sigma(), 4.0);
    assert_eq!(c.amplitude(), 0.7);
    assert_eq!(c.dropout(), 0.15);
    assert_eq!(c.noise_sigma(), 0.025);
    assert!(DegradeConfig::new(1.1, 0).is_err());
    assert!(DegradeConfig::new(-0.1, 0).is_err());
}

#[test]
fn degradation_is_monotone_in_severity() {
    let phantoms: Vec<_> = (0..20).map(phantom).collect();
    let mut last = f64::INFINITY;
    for &(_, sev) in REGIMES.iter() {
        let mean = phantoms
            .iter()
            .enumerate()
            .map(|(i, ph)| {
                // one seed per phantom across severities, so dropped blobs nest as severity grows
                let soft: SoftMask =
                    degrade_mask(&ph.pathology, &DegradeConfig::new(sev, i as u64).unwrap())
                        .unwrap();
                dice::<f64>(&double_threshold(&soft, 0.15, 0.4), &ph.pathology).unwrap()
            })
            .sum::<f64>()
            / phantoms.len() as f64;
        assert!(mean <= last + 1e-12, "severity {sev}: {mean} after {last}");
        last = mean;
    }
}

#[test]
fn regime_lookup() {
    assert_eq!(severity_for_regime(100).unwrap(), 0.1);
    assert_eq!(severity_for_regime(8).unwrap(), 0.8);
    assert_eq!(severity_for_regime(5).unwrap(), 0.9);
    assert!(severity_for_regime(42).is_err());
    assert_eq!(severity_tag(0.8), "0.8");
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PhantomConfig {
        width: 48,
        height: 40,
        ..PhantomConfig::default()
    };
    let manifest = write_dataset(dir.path(), 3, 20, &cfg).unwrap();
    assert_eq!(manifest.images.len(), 3);
    let items = list_items(dir.path()).unwrap();
    assert_eq!(
        items.iter().map(|i| i.0.as_str()).collect::<Vec<_>>(),
        ["phantom_20", "phantom_21", "phantom_22"]
    );

    let ph: Phantom<f64> = generate_phantom(&cfg.with_seed(21)).unwrap();
    let item = load_item::<f64>(&items[1].0, &items[1].1, &[0.8]).unwrap();
    assert_eq!(item.tendon, ph.tendon);
    assert_eq!(item.pathology, ph.pathology);
    for (a, b) in item.image.intensity().iter().zip(ph.image.intensity()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
    }
    // coarse masks are stored as f32
    let soft: SoftMask = degrade_mask(
        &ph.pathology,
        &DegradeConfig::new(0.8, coarse_seed(21, 0.8)).unwrap(),
    )
    .unwrap();
    for (a, b) in item.coarse["0.8"].values().iter().zip(soft.values()) {
        assert!((a - b).abs() < 1e-6);
    }

    // without a manifest the directory scan finds the same items
    std::fs::remove_file(dir.path().join("manifest.json")).unwrap();
    let scanned = list_items(dir.path()).unwrap();
    assert_eq!(scanned, items);

    let missing = items[0].1.join("coarse_s0.8.srf");
    std::fs::remove_file(&missing).unwrap();
    assert!(read_soft_mask::<f64>(&missing).is_err());
    assert!(load_item::<f64>(&items[0].0, &items[0].1, &[0.8]).is_err());
}
