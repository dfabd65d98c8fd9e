//! LDA/QDA equivalence under equal class covariances.

use num_complex::Complex64;
use qutrit_readout::discriminant::*;
use qutrit_readout::rng::Stream;

#[test]
fn qda_reproduces_lda_when_covariances_coincide() {
    // Every class is the same correlated cloud translated, so per-class
    // covariances are identical and QDA must make LDA's decisions.
    let mut rng = Stream::new(4, "da-test/equal-cov", 0);
    let cloud: Vec<Complex64> = (0..400)
        .map(|_| {
            let (u, v) = (rng.normal(), rng.normal());
            Complex64::new(u, 0.6 * u + 0.5 * v)
        })
        .collect();
    let offsets = [Complex64::new(-2.0, 0.0), Complex64::new(2.0, 0.5), Complex64::new(0.0, 3.0)];
    let mut pts = Vec::new();
    let mut ys = Vec::new();
    for (l, o) in offsets.iter().enumerate() {
        for c in &cloud {
            pts.push(c + o);
            ys.push(l as u8);
        }
    }
    let lda = train_discriminant(DiscriminantKind::Lda, 0, &pts, &ys).unwrap();
    let qda = train_discriminant(DiscriminantKind::Qda, 0, &pts, &ys).unwrap();
    for (a, b) in lda.classes.iter().zip(&qda.classes) {
        for i in 0..2 {
            for j in 0..2 {
                let rel = (a.cov[i][j] * (pts.len() as f64 - 3.0) / (pts.len() as f64) - b.cov[i][j] * (cloud.len() as f64 - 1.0) / cloud.len() as f64).abs();
                assert!(rel < 1e-9, "population covariances must agree");
            }
        }
    }
    let mut probe = Stream::new(5, "da-test/probe", 0);
    let mut disagreements = 0;
    for _ in 0..5000 {
        let p = Complex64::new(3.0 * probe.normal(), 3.0 * probe.normal());
        if lda.classify(p) != qda.classify(p) {
            disagreements += 1;
        }
    }
    // LDA and QDA normalize scatter by N−C and n_c−1 respectively; the tiny
    // scale difference can only flip points lying on a boundary.
    assert!(disagreements <= 5, "{disagreements} disagreements");
}

#[test]
fn absent_classes_are_skipped() {
    let pts = [Complex64::new(0.0, 0.0), Complex64::new(0.1, 0.0), Complex64::new(5.0, 0.0), Complex64::new(5.1, 0.2), Complex64::new(0.0, 0.1), Complex64::new(5.0, -0.1)];
    let m = train_discriminant(DiscriminantKind::Qda, 2, &pts, &[0, 0, 2, 2, 0, 2]).unwrap();
    assert_eq!(m.classes.iter().map(|c| c.level).collect::<Vec<_>>(), vec![0, 2]);
    assert_eq!(m.classify(Complex64::new(4.8, 0.0)), 2);
    assert_eq!(m.classify(Complex64::new(0.2, 0.0)), 0);
}
