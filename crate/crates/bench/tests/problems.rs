use nightrack_bench::{noise, scan_problem};
use nightrack_core::ssm::{selective_scan_parallel, selective_scan_seq};

#[test]
fn scan_problems_are_seeded_and_well_posed() {
    let (u, p) = scan_problem(3, 100, 6, 4);
    let (u2, p2) = scan_problem(3, 100, 6, 4);
    assert_eq!(u, u2);
    assert_eq!(
        selective_scan_seq(&u, &p).unwrap(),
        selective_scan_seq(&u2, &p2).unwrap()
    );
    assert_ne!(u, scan_problem(4, 100, 6, 4).0);

    let s = selective_scan_seq(&u, &p).unwrap();
    let q = selective_scan_parallel(&u, &p).unwrap();
    let scale = s.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let err = s
        .data()
        .iter()
        .zip(q.data())
        .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
    assert!(err <= 1e-4 * scale, "{err} vs {scale}");
}

#[test]
fn noise_is_in_the_unit_interval() {
    let t = noise(1, &[3, 8, 8]);
    assert_eq!(t.shape(), &[3, 8, 8]);
    assert!(t.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    assert_eq!(t, noise(1, &[3, 8, 8]));
}
