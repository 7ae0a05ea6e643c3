use agat_demo::{flops_view, Demo, CLASSES};

#[test]
fn flops_view_matches_calibration() {
    let v = flops_view("agat", 0.4).unwrap();
    assert_eq!(v.seq_lens.len(), 12);
    assert_eq!(v.seq_lens[0], 197);
    assert!((v.savings - 0.4).abs() < 0.012);
    assert_eq!(v.block_flops.iter().sum::<u64>(), v.total);
    let none = flops_view("none", 0.0).unwrap();
    assert_eq!(none.total, none.baseline);
    assert!(flops_view("agat", 1.5).is_err());
}

#[test]
fn trained_demo_drops_and_attacks() {
    let demo = Demo::train(0, 3).unwrap();
    let mut correct = 0;
    for i in 0..16 {
        let view = demo.kept(i, 0.6).unwrap();
        correct += (view.prediction == view.label) as usize;
        assert_eq!(view.layers[0].len(), 64);
        for pair in view.layers.windows(2) {
            assert!(pair[1].len() < pair[0].len());
            assert!(pair[1].iter().all(|p| pair[0].contains(p)));
        }
    }
    assert!(correct >= 12, "demo model only got {correct}/16");

    let a = demo.attack(1, 0.1, 5).unwrap();
    assert!(a.linf <= 0.1 + 1e-12);
    assert_eq!(a.clean_probs.len(), CLASSES);
    let none = demo.attack(1, 0.0, 3).unwrap();
    assert_eq!(none.clean, none.adversarial);
}
