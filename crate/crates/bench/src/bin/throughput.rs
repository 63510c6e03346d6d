use annihilate_core::stats::*;
use annihilate_core::*;
use std::time::Instant;

fn main() {
    let nu = InitialLaw::parse("1:0.25,-1:0.25,0:0.5").unwrap();

    let g = ReflectiveGraph::parse("torus:d=1,L=32768").unwrap();
    let plan = ReplicaPlan {
        init: InitSpec::Law(nu.clone()),
        params: SimParams { d_a: 1.0, d_b: 1.0, t_max: 5000.0 },
        replicas: 8,
        base_seed: 1000,
        track_wrap: true,
        times: None,
    };
    let t0 = Instant::now();
    let curve = run_replicas(&g, &plan).unwrap();
    let fit = fit_exponent(&curve, (100.0, 5000.0), 200, 7).unwrap();
    println!(
        "d=1 (8 reps, {:.1}s): slope {:.4} CI [{:.4}, {:.4}], wrap p5 {:?}",
        t0.elapsed().as_secs_f64(), fit.slope, fit.ci_low, fit.ci_high, curve.wrap_quantile(0.05)
    );
    // universal lower bound probe: min t*rho over window
    let min_trho = curve.times.iter().zip(&curve.rho_mean)
        .filter(|(t, _)| **t >= 100.0 && **t <= 5000.0)
        .map(|(t, r)| t * r)
        .fold(f64::INFINITY, f64::min);
    println!("d=1 min t*rho over window = {:.3} (>= 1/16 = 0.0625?)", min_trho);

    let g2 = ReflectiveGraph::parse("torus:d=2,L=512").unwrap();
    let plan2 = ReplicaPlan {
        init: InitSpec::Law(nu),
        params: SimParams { d_a: 1.0, d_b: 1.0, t_max: 1000.0 },
        replicas: 2,
        base_seed: 500,
        track_wrap: true,
        times: None,
    };
    let t0 = Instant::now();
    let curve2 = run_replicas(&g2, &plan2).unwrap();
    let fit2 = fit_exponent(&curve2, (100.0, 1000.0), 200, 7).unwrap();
    println!(
        "d=2 (2 reps, {:.1}s): slope {:.4} CI [{:.4}, {:.4}]",
        t0.elapsed().as_secs_f64(), fit2.slope, fit2.ci_low, fit2.ci_high
    );
    let min_trho2 = curve2.times.iter().zip(&curve2.rho_mean)
        .filter(|(t, _)| **t >= 100.0 && **t <= 1000.0)
        .map(|(t, r)| t * r)
        .fold(f64::INFINITY, f64::min);
    println!("d=2 min t*rho over window = {:.3}", min_trho2);
}
