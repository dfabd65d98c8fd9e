//! Spectral clustering: order independence, reproducibility and level naming.

use num_complex::Complex64;
use qutrit_readout::cluster::*;
use qutrit_readout::dataset::generate_dataset;
use qutrit_readout::dsp::{mtv, Demodulator};
use qutrit_readout::rng::Stream;
use qutrit_readout::sim::DeviceConfig;

fn three_blobs(n: usize, seed: u64) -> Vec<Complex64> {
    let mut rng = Stream::new(seed, "cluster-test/blobs", 0);
    let centers = [Complex64::new(0.0, 1.0), Complex64::new(-0.87, -0.5), Complex64::new(0.87, -0.5)];
    let sizes = [n, n, n / 10];
    centers
        .iter()
        .zip(sizes)
        .flat_map(|(c, k)| (0..k).map(|_| c + Complex64::new(0.08 * rng.normal(), 0.08 * rng.normal())).collect::<Vec<_>>())
        .collect()
}

fn small_params(seed: u64) -> ClusterParams {
    ClusterParams { subsample: 300, restarts: 20, ..ClusterParams::new(seed) }
}

/// Partition as a canonical list of groups of point values.
fn groups(points: &[Complex64], assignments: &[usize]) -> Vec<Vec<(u64, u64)>> {
    let mut out: Vec<Vec<(u64, u64)>> = (0..N_CLUSTERS)
        .map(|c| {
            let mut g: Vec<(u64, u64)> = points.iter().zip(assignments).filter(|(_, &a)| a == c).map(|(p, _)| (p.re.to_bits(), p.im.to_bits())).collect();
            g.sort();
            g
        })
        .collect();
    out.sort();
    out
}

#[test]
fn partition_does_not_depend_on_input_order() {
    let points = three_blobs(200, 1);
    let params = small_params(3);
    let base = spectral_cluster(&points, &params, 0).unwrap();
    for round in 0..3u64 {
        let mut perm: Vec<usize> = (0..points.len()).collect();
        Stream::new(round, "cluster-test/perm", 0).shuffle(&mut perm);
        let shuffled: Vec<Complex64> = perm.iter().map(|&i| points[i]).collect();
        let sc = spectral_cluster(&shuffled, &params, 0).unwrap();
        assert_eq!(groups(&shuffled, &sc.assignments), groups(&points, &base.assignments), "round {round}");
        assert_eq!(sc.sigma, base.sigma);
    }
}

#[test]
fn same_seed_same_clustering() {
    let points = three_blobs(150, 2);
    let a = spectral_cluster(&points, &small_params(5), 1).unwrap();
    let b = spectral_cluster(&points, &small_params(5), 1).unwrap();
    assert_eq!(a, b);
}

#[test]
fn near_noiseless_preparations_are_named_by_majority() {
    let mut device = DeviceConfig::default_for(1, 8);
    device.noise_std = 0.01;
    let ds = generate_dataset(&device, &[vec![0], vec![1], vec![2]], 200).unwrap();
    let demod = Demodulator::new(&device);
    let points: Vec<Complex64> = ds.shots.iter().map(|s| mtv(&demod.demodulate(s, 0, 500).unwrap()).unwrap()).collect();
    let params = ClusterParams { subsample: 600, restarts: 20, ..ClusterParams::new(1) };
    let sc = spectral_cluster(&points, &params, 0).unwrap();
    let prep: Vec<Option<u8>> = ds.shots.iter().map(|s| Some(s.prep_label[0])).collect();
    let model = assign_labels(0, &sc, &points, &prep, &params).unwrap();
    assert!(!model.used_fallback);
    let mut checked = 0;
    for (i, s) in ds.shots.iter().enumerate() {
        let t = &s.truth.qubits[0];
        if t.events.is_empty() && t.effective_initial_level == s.prep_label[0] {
            assert_eq!(model.cluster_level[sc.assignments[i]], s.prep_label[0], "shot {i}");
            checked += 1;
        }
    }
    assert!(checked > 500);
    for (lvl, c) in model.level_centroids().iter().enumerate() {
        assert!((c - device.qubits[0].level_response[lvl]).norm() < 0.2, "level {lvl} centroid {c}");
    }
}
