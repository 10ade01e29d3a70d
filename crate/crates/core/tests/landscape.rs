use bragg_core::robustness::{quadrature_row, Method};
use bragg_core::scheme::fringe_extrema;
use bragg_core::{
    build_rabi_scheme, contrast, scan_landscape, LadderParams, LandscapeConfig, SchemeConfig,
};

fn config(method: Method) -> LandscapeConfig {
    LandscapeConfig {
        mu_grid: vec![1.0],
        dbeta_grid: vec![0.0, 0.05],
        n_samples: 60,
        method,
        ..Default::default()
    }
}

#[test]
fn mc_scan_is_thread_count_independent() {
    let seq = build_rabi_scheme(&SchemeConfig { dt: 0.2, ..Default::default() }).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| scan_landscape(&seq, &config(Method::MonteCarlo)).unwrap())
    };
    let a = run(1);
    let b = run(3);
    for (p, q) in a.points.iter().zip(&b.points) {
        assert_eq!(p.c_bar.to_bits(), q.c_bar.to_bits());
        assert_eq!(p.stderr_c.to_bits(), q.stderr_c.to_bits());
    }
    // Δβ = 0 is a single deterministic evaluation.
    let (hi, lo) = fringe_extrema(&seq, &LadderParams::default(), 0.2).unwrap();
    approx::assert_abs_diff_eq!(a.points[0].c_bar, contrast(hi, lo).unwrap(), epsilon = 1e-12);
    assert!(a.points[0].stderr_c < 1e-12);
}

#[test]
fn quadrature_agrees_with_monte_carlo() {
    let seq = build_rabi_scheme(&SchemeConfig { dt: 0.2, ..Default::default() }).unwrap();
    let mc = scan_landscape(&seq, &config(Method::MonteCarlo)).unwrap();
    let q = quadrature_row(&seq, 1.0, &config(Method::Quadrature)).unwrap();
    let (m, r) = (&mc.points[1], &q[1]);
    assert!(
        (m.c_bar - r.c_bar).abs() < 4.0 * m.stderr_c + 1e-3,
        "mc {} ± {} vs quadrature {}",
        m.c_bar,
        m.stderr_c,
        r.c_bar
    );
}
