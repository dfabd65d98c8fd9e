//! Filter-bank checks against brute-force oracles and simulator ground truth.

use num_complex::Complex64;
use qutrit_readout::dataset::{computational_states, generate_dataset, Split};
use qutrit_readout::dsp::*;
use qutrit_readout::rng::Stream;
use qutrit_readout::sim::{sample_trace, DeviceConfig, Transition};

fn trace(samples: Vec<Complex64>) -> BasebandTrace {
    BasebandTrace { qubit_index: 0, samples }
}

fn random_class(rng: &mut Stream, n_traces: usize, len: usize, offset: f64, spread: f64) -> Vec<BasebandTrace> {
    (0..n_traces)
        .map(|_| trace((0..len).map(|_| Complex64::new(offset + spread * rng.normal(), -offset + spread * rng.normal())).collect()))
        .collect()
}

/// Spreadsheet-style evaluation: real and imaginary parts handled as separate
/// columns, every statistic written out longhand.
fn oracle_kernel(a: &[BasebandTrace], b: &[BasebandTrace]) -> Vec<Complex64> {
    let len = a[0].samples.len();
    let column_stats = |class: &[BasebandTrace], t: usize| -> (f64, f64, f64) {
        let n = class.len() as f64;
        let re: Vec<f64> = class.iter().map(|tr| tr.samples[t].re).collect();
        let im: Vec<f64> = class.iter().map(|tr| tr.samples[t].im).collect();
        let mean_re = re.iter().sum::<f64>() / n;
        let mean_im = im.iter().sum::<f64>() / n;
        let var_re = re.iter().map(|x| (x - mean_re).powi(2)).sum::<f64>() / n;
        let var_im = im.iter().map(|x| (x - mean_im).powi(2)).sum::<f64>() / n;
        (mean_re, mean_im, var_re + var_im)
    };
    let stats: Vec<_> = (0..len).map(|t| (column_stats(a, t), column_stats(b, t))).collect();
    let max_dvar = stats.iter().map(|(sa, sb)| (sb.2 - sa.2).abs()).fold(0.0, f64::max);
    let eps = 1e-12 * max_dvar;
    stats
        .iter()
        .map(|(sa, sb)| {
            let num = Complex64::new(sb.0 - sa.0, sb.1 - sa.1);
            let d = sb.2 - sa.2;
            if d == 0.0 {
                num
            } else {
                num / (d + d.signum() * eps)
            }
        })
        .collect()
}

fn refs(v: &[BasebandTrace]) -> Vec<&BasebandTrace> {
    v.iter().collect()
}

#[test]
fn kernel_matches_brute_force_oracle_on_random_toys() {
    let mut worst: f64 = 0.0;
    for case in 0..100u64 {
        let mut rng = Stream::new(case, "dsp-test/kernel-oracle", 0);
        let total = 4 + rng.below(5) as usize; // 4..=8 traces
        let n_a = 2 + rng.below(total as u64 - 3) as usize;
        let n_b = total - n_a;
        let len = 1 + rng.below(16) as usize;
        let a = random_class(&mut rng, n_a, len, 0.0, 1.0);
        let b = random_class(&mut rng, n_b, len, 0.7, 1.5);
        let got = build_kernel(&refs(&a), &refs(&b)).unwrap();
        let want = oracle_kernel(&a, &b);
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            let rel = (g - w).norm() / w.norm().max(f64::MIN_POSITIVE);
            worst = worst.max(rel);
            assert!(rel <= 1e-12, "case {case}: {g} vs {w} (rel {rel:e})");
        }
    }
    eprintln!("worst relative kernel deviation {worst:e}");
}

#[test]
fn hand_enumerable_four_trace_set() {
    // Bin 0: a = {0, 2}, b = {1, 5}: μ_a = 1, μ_b = 3, σ²_a = 1, σ²_b = 4 → K = 2/3.
    // Bin 1: a = {i, -i}, b = {1+i, 1-i}: Δμ = 1, σ²_a = σ²_b = 1 → fallback K = Δμ = 1.
    // Bin 2: a = {1, 1}, b = {0, 4}: Δμ = 1, σ²_a = 0, σ²_b = 4 → K = 1/4.
    let c = |re: f64, im: f64| Complex64::new(re, im);
    let a = [trace(vec![c(0.0, 0.0), c(0.0, 1.0), c(1.0, 0.0)]), trace(vec![c(2.0, 0.0), c(0.0, -1.0), c(1.0, 0.0)])];
    let b = [trace(vec![c(1.0, 0.0), c(1.0, 1.0), c(0.0, 0.0)]), trace(vec![c(5.0, 0.0), c(1.0, -1.0), c(4.0, 0.0)])];
    let k = build_kernel(&refs(&a), &refs(&b)).unwrap();
    let eps = 1e-12 * 4.0;
    assert!((k[0] - c(2.0 / (3.0 + eps), 0.0)).norm() < 1e-15);
    assert_eq!(k[1], c(1.0, 0.0));
    assert!((k[2] - c(1.0 / (4.0 + eps), 0.0)).norm() < 1e-15);
    assert_eq!(k, oracle_kernel(&a, &b));
}

#[test]
fn swapping_classes_keeps_regular_bins_and_negates_fallback_bins() {
    for case in 0..20u64 {
        let mut rng = Stream::new(case, "dsp-test/swap", 0);
        let a = random_class(&mut rng, 5, 12, 0.0, 1.0);
        let mut b = random_class(&mut rng, 4, 12, 0.5, 2.0);
        // Make bin 3 a fallback bin: small integers shifted by one, so both
        // classes have exactly the same variance there.
        let mut a4: Vec<BasebandTrace> = a[..4].to_vec();
        for (i, (tb, ta)) in b.iter_mut().zip(a4.iter_mut()).enumerate() {
            ta.samples[3] = Complex64::new(i as f64, (i * i) as f64);
            tb.samples[3] = ta.samples[3] + Complex64::new(1.0, 0.0);
        }
        let ab = build_kernel(&refs(&a4), &refs(&b)).unwrap();
        let ba = build_kernel(&refs(&b), &refs(&a4)).unwrap();
        for t in 0..12 {
            if t == 3 {
                assert!((ab[t] + ba[t]).norm() <= 1e-12 * ab[t].norm(), "fallback bin must flip sign");
            } else {
                assert!((ab[t] - ba[t]).norm() <= 1e-12 * ab[t].norm(), "bin {t}: {} vs {}", ab[t], ba[t]);
            }
        }
    }
}

fn toy_bank(device: &DeviceConfig, seed: u64) -> MatchedFilterBank {
    let n = device.n_samples();
    let mut rng = Stream::new(seed, "dsp-test/bank", 0);
    let kernels = (0..device.n_qubits())
        .flat_map(|q| KernelKind::ALL.iter().map(move |&kind| (q, kind)))
        .map(|(q, kind)| MatchedFilterKernel {
            qubit_index: q,
            kind,
            zero: false,
            taps: (0..n).map(|_| Complex64::new(rng.normal(), rng.normal())).collect(),
        })
        .collect();
    MatchedFilterBank {
        dataset_id: "toy".into(),
        kernel_length: n,
        sample_rate: device.sample_rate,
        if_freqs: device.qubits.iter().map(|q| q.if_freq).collect(),
        kernels,
    }
}

#[test]
fn apply_bank_equals_direct_accumulation() {
    let mut device = DeviceConfig::default_for(3, 5);
    device.sample_rate = 500e6;
    device.duration = 64.0 / 500e6;
    let bank = toy_bank(&device, 1);
    let shot = sample_trace(&device, &[1, 0, 2], &mut Stream::new(3, "dsp-test/shot", 0)).unwrap();
    for n_keep in [1, 17, 64] {
        let features = apply_bank(&bank, &shot, n_keep).unwrap();
        assert_eq!(features.len(), 27);
        for (idx, k) in bank.kernels.iter().enumerate() {
            let f_if = device.qubits[k.qubit_index].if_freq;
            let mut acc = 0.0;
            for t in 0..n_keep {
                let phase = -std::f64::consts::TAU * f_if * t as f64 / device.sample_rate;
                let z = Complex64::new(shot.i_samples[t] as f64, shot.q_samples[t] as f64) * Complex64::from_polar(1.0, phase);
                acc += (k.taps[t].conj() * z).re;
            }
            let want = acc / n_keep as f64;
            assert!((features[idx] - want).abs() <= 1e-12 * (1.0 + want.abs()), "feature {idx} n_keep {n_keep}: {} vs {want}", features[idx]);
        }
    }
}

#[test]
fn apply_bank_is_linear_in_the_trace() {
    let device = DeviceConfig::default_for(2, 9);
    let bank = toy_bank(&device, 2);
    let shot = sample_trace(&device, &[0, 1], &mut Stream::new(1, "dsp-test/shot", 0)).unwrap();
    let base = apply_bank(&bank, &shot, 500).unwrap();
    // Powers of two scale f32 samples exactly.
    for alpha in [-2.0f32, 0.5, 4.0] {
        let mut scaled = shot.clone();
        scaled.i_samples.iter_mut().for_each(|x| *x *= alpha);
        scaled.q_samples.iter_mut().for_each(|x| *x *= alpha);
        let f = apply_bank(&bank, &scaled, 500).unwrap();
        for (x, y) in f.iter().zip(&base) {
            assert!((x - alpha as f64 * y).abs() <= 1e-9 * (1.0 + y.abs()), "{x} vs {}", alpha as f64 * y);
        }
    }
}

#[test]
fn qubit_count_mismatch_is_rejected() {
    let bank = toy_bank(&DeviceConfig::default_for(2, 1), 0);
    let shot = sample_trace(&DeviceConfig::default_for(3, 1), &[0, 0, 0], &mut Stream::new(0, "dsp-test/shot", 0)).unwrap();
    assert!(apply_bank(&bank, &shot, 500).is_err());
    assert!(truncate_bank(&bank, 0).is_err());
    assert!(truncate_bank(&bank, 501).is_err());
}

#[test]
fn noiseless_qmf_separates_levels_zero_and_one() {
    // Level 0 gets no events, so σ²_1 ≥ σ²_0 in every bin and each bin adds
    // |Δμ|²/Δσ² ≥ 0 to the separation.
    let mut device = DeviceConfig::default_for(1, 4);
    device.noise_std = 0.0;
    let q = &mut device.qubits[0];
    (q.p_excite_01, q.p_excite_02, q.p_excite_12, q.p_leak_prep) = (0.0, 0.0, 0.0, 1e-4);
    let ds = generate_dataset(&device, &[vec![0], vec![1]], 400).unwrap();
    let demod = Demodulator::new(&device);
    let traces: Vec<BasebandTrace> = ds.shots.iter().map(|s| demod.demodulate(s, 0, 500).unwrap()).collect();
    let class = |lvl| -> Vec<&BasebandTrace> { ds.shots.iter().zip(&traces).filter(|(s, _)| s.truth.qubits[0].effective_initial_level == lvl).map(|(_, t)| t).collect() };
    let taps = build_kernel(&class(0), &class(1)).unwrap();
    let kernel = MatchedFilterKernel { qubit_index: 0, kind: KernelKind::Qmf01, zero: false, taps };
    let eventless = |lvl| {
        ds.shots.iter().zip(&traces).filter(move |(s, _)| {
            let t = &s.truth.qubits[0];
            t.effective_initial_level == lvl && t.events.is_empty()
        })
    };
    let response = |tr: &BasebandTrace| kernel.taps.iter().zip(&tr.samples).map(|(k, z)| (k.conj() * z).re).sum::<f64>() / 500.0;
    let max0 = eventless(0).map(|(_, t)| response(t)).fold(f64::NEG_INFINITY, f64::max);
    let min1 = eventless(1).map(|(_, t)| response(t)).fold(f64::INFINITY, f64::min);
    assert!(eventless(0).count() > 100 && eventless(1).count() > 100);
    assert!(min1 > max0, "QMF(0|1): min over |1> {min1} must exceed max over |0> {max0}");
}

#[test]
fn relaxation_tags_are_mostly_real_decays_at_default_snr() {
    let device = DeviceConfig::default_for(2, 21);
    let ds = generate_dataset(&device, &computational_states(2), 2000).unwrap();
    let demod = Demodulator::new(&device);
    let q = 0;
    let mtvs: Vec<Complex64> = ds.shots.iter().map(|s| mtv(&demod.demodulate(s, q, 500).unwrap()).unwrap()).collect();
    let train = ds.indices(Split::Train);
    let centroids: [Complex64; 3] = std::array::from_fn(|lvl| {
        let pts: Vec<Complex64> = train.iter().filter(|&&i| ds.shots[i].truth.qubits[q].effective_initial_level == lvl as u8).map(|&i| mtvs[i]).collect();
        pts.iter().sum::<Complex64>() / pts.len() as f64
    });
    let prep: Vec<u8> = ds.prep_levels(q);
    let tags = tag_error_traces(&mtvs, &prep, &centroids).unwrap();
    let tagged: Vec<usize> = (0..ds.len()).filter(|&i| tags[i] == Some(ErrorClass::Relax10)).collect();
    let real = tagged.iter().filter(|&&i| ds.shots[i].truth.qubits[q].has_transition(Transition::Relax10)).count();
    let precision = real as f64 / tagged.len() as f64;
    assert!(tagged.len() >= 20, "only {} relax(1→0) tags", tagged.len());
    assert!(precision >= 0.8, "relax(1→0) tag precision {precision:.3} over {} tags", tagged.len());
}

#[test]
fn truncation_keeps_constant_traces_invariant() {
    let mut device = DeviceConfig::default_for(1, 3);
    device.qubits[0].if_freq = 0.0;
    let bank = toy_bank(&device, 7);
    let mut shot = sample_trace(&device, &[0], &mut Stream::new(0, "dsp-test/shot", 0)).unwrap();
    shot.i_samples.iter_mut().for_each(|x| *x = 0.75);
    shot.q_samples.iter_mut().for_each(|x| *x = -0.25);
    // With unit taps every n_keep must give Re(c).
    let mut unit = bank.clone();
    unit.kernels.iter_mut().for_each(|k| k.taps.iter_mut().for_each(|t| *t = Complex64::new(1.0, 0.0)));
    for n_keep in [1, 100, 400, 500] {
        let short = truncate_bank(&unit, n_keep).unwrap();
        assert_eq!(short.kernel_length, n_keep);
        for f in apply_bank(&short, &shot, n_keep).unwrap() {
            assert!((f - 0.75).abs() < 1e-12);
        }
    }
    assert_eq!(apply_bank(&truncate_bank(&bank, 500).unwrap(), &shot, 500).unwrap(), apply_bank(&bank, &shot, 500).unwrap());
}
