use grokwatch::linalg::gaussian_vec;
use grokwatch::params::{ParamRole, ParamView};
use grokwatch::trajectory::{
    center_rows, expanding_pc1, pca, random_walk_null, spectral_split, trajectory_matrix, MatrixSeries, SnapshotArchive,
    TrajectoryError,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn view() -> ParamView {
    ParamView::builder()
        .add("blocks.0.attn.W_Q", &[6, 4], ParamRole::Attention)
        .add("blocks.0.ln1.gain", &[6], ParamRole::Norm)
        .add("blocks.0.mlp.W_up", &[6, 5], ParamRole::Mlp)
        .build()
}

fn names() -> Vec<String> {
    vec!["blocks.0.attn.W_Q".into(), "blocks.0.mlp.W_up".into()]
}

#[test]
fn archive_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let v = view();
    let mut a = SnapshotArchive::create(dir.path(), "rt", 10, &v, &names()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut written = Vec::new();
    for step in [0u64, 10, 20, 30] {
        let full: Vec<f32> = gaussian_vec(v.total_len(), &mut rng).into_iter().map(|x| x as f32).collect();
        a.record_from_full(step, &v, &full).unwrap();
        written.push(full);
    }
    let a = SnapshotArchive::open(dir.path()).unwrap();
    assert_eq!(a.steps(), &[0, 10, 20, 30]);
    let q = v.entry("blocks.0.attn.W_Q").unwrap();
    for (i, &s) in a.steps().iter().enumerate() {
        let back = a.read_matrix(s, "blocks.0.attn.W_Q").unwrap();
        let want = &written[i][q.range()];
        assert_eq!(back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), want.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }
    assert!(matches!(a.read_matrix(0, "blocks.0.ln1.gain"), Err(TrajectoryError::UnknownMatrix(_))));
}

#[test]
fn archive_rejects_out_of_order_steps_and_truncates() {
    let dir = tempfile::tempdir().unwrap();
    let v = view();
    let mut a = SnapshotArchive::create(dir.path(), "order", 10, &v, &names()).unwrap();
    let zeros = vec![0.0f32; a.manifest().total_len()];
    a.record_flat(10, &zeros).unwrap();
    assert!(matches!(a.record_flat(10, &zeros), Err(TrajectoryError::NotIncreasing { step: 10, last: 10 })));
    assert!(matches!(a.record_flat(20, &zeros[1..]), Err(TrajectoryError::Length { .. })));
    a.record_flat(20, &zeros).unwrap();
    a.record_flat(30, &zeros).unwrap();
    a.truncate_after(15).unwrap();
    assert_eq!(SnapshotArchive::open(dir.path()).unwrap().steps(), &[10]);
}

fn random_series(len: usize, dim: usize, seed: u64) -> MatrixSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cur = vec![0.0f64; dim];
    let mut values = Vec::new();
    for _ in 0..len {
        values.push(cur.iter().map(|&x| x as f32).collect());
        cur.iter_mut().zip(gaussian_vec(dim, &mut rng)).for_each(|(c, d)| *c += d);
    }
    MatrixSeries { name: "blocks.0.attn.W_Q".into(), steps: (0..len as u64).map(|i| i * 100).collect(), values }
}

#[test]
fn expanding_window_matches_one_shot_pca() {
    let s = random_series(12, 40, 3);
    let curve = expanding_pc1(&s).unwrap();
    assert_eq!(curve.points.len(), 10);
    let rows = s.displacement_rows();
    for (m, &(step, pc1)) in (3..=12).zip(&curve.points) {
        let direct = pca(&center_rows(&rows[..m]), step, 1).unwrap().pc1;
        assert!((pc1.unwrap() - direct).abs() < 1e-8, "window {m}: {pc1:?} vs {direct}");
    }
}

#[test]
fn pca_ratios_are_a_distribution() {
    let s = random_series(9, 30, 4);
    let p = pca(&center_rows(&s.displacement_rows()), 800, 5).unwrap();
    assert!((p.ratios.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(p.ratios.windows(2).all(|w| w[0] >= w[1] - 1e-12));
    let b = p.basis();
    assert_eq!(b.rank(), 5);
    assert!(b.orthonormality_error() < 1e-9);
}

#[test]
fn straight_line_is_one_component_and_beats_the_null() {
    let dim = 50;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dir = gaussian_vec(dim, &mut rng);
    // uneven steps along a single direction
    let values: Vec<Vec<f32>> = (0..15).map(|i| dir.iter().map(|d| (d * (i * i) as f64) as f32).collect()).collect();
    let s = MatrixSeries { name: "W".into(), steps: (0..15).collect(), values };
    let c = expanding_pc1(&s).unwrap();
    assert!(c.points.iter().all(|p| p.1.unwrap() > 99.99));
    let null = random_walk_null(&s, 20, &mut rng).unwrap();
    assert!(null.z > 3.0, "z = {}", null.z);
}

#[test]
fn random_walk_is_not_distinguished_from_the_null() {
    let s = random_series(20, 200, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let null = random_walk_null(&s, 40, &mut rng).unwrap();
    assert!(null.z.abs() < 3.0, "z = {}", null.z);
}

#[test]
fn spectral_split_groups_by_role() {
    let dir = tempfile::tempdir().unwrap();
    let v = view();
    let mut a = SnapshotArchive::create(dir.path(), "split", 1, &v, &names()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let line = gaussian_vec(24, &mut rng);
    let mut walk = vec![0.0; 30];
    for step in 0..10u64 {
        let mut flat: Vec<f32> = line.iter().map(|x| (x * step as f64) as f32).collect();
        flat.extend(walk.iter().map(|&x: &f64| x as f32));
        a.record_flat(step, &flat).unwrap();
        walk.iter_mut().zip(gaussian_vec(30, &mut rng)).for_each(|(w, d)| *w += d);
    }
    let split = spectral_split(&a).unwrap();
    assert!(split.attention_mean.unwrap() > 99.9);
    assert!(split.mlp_mean.unwrap() < split.attention_mean.unwrap());
    assert_eq!(trajectory_matrix(&a, "blocks.0.attn.W_Q", 5).unwrap().len(), 6);
}
