use downstep::fit::{build_nlp, reference_from_simulation, solve_fit, FitParams, FitResult, SolveOptions};
use downstep::profiles::{build_synthetic_surfaces, DownstepShapeSpec, FlatGaitSpec};
use downstep::sim::{run_scenario, ScenarioConfig};

fn unorm(r: &FitResult) -> f64 {
    r.controls.iter().flatten().flat_map(|u| u.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

fn main() {
    let surfaces =
        build_synthetic_surfaces(&FlatGaitSpec::default(), &DownstepShapeSpec::default()).unwrap();
    let cfg = ScenarioConfig::flat(14);
    let out = run_scenario(&cfg, &surfaces).unwrap();
    let base = reference_from_simulation(&out, &cfg, 9, 8, 1.0).unwrap();
    let frozen = FitParams {
        stiffness_coeffs: cfg.leg_params.stiffness_coeffs,
        damping: 0.0,
    };
    for w in [1.0, 1e6] {
        let mut p = base.clone();
        p.actuation_weight = w;
        p.frozen = Some(frozen);
        p.duration_band = 0.35;
        let t0 = std::time::Instant::now();
        match solve_fit(&build_nlp(p).unwrap(), &SolveOptions::default()) {
            Ok(r) => println!(
                "w={w:.0e}: conv={} it={} ‖u‖={:.3e} cost={:.3e} viol={:.1e} t={:.0}s",
                r.converged, r.iterations, unorm(&r), r.cost, r.max_constraint_violation,
                t0.elapsed().as_secs_f64()
            ),
            Err(e) => println!("w={w:.0e}: ERROR {e}"),
        }
    }
}
