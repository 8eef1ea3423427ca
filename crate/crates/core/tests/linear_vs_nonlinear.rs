// The assembled A must be the Jacobian of one nonlinear slot at the equilibrium.

use qfmux::control::{ControlMode, ControllerGains, Policy, RateLimits};
use qfmux::equilibrium::solve_equilibrium;
use qfmux::linearization::{assemble_a, StateLayout};
use qfmux::plant::PlantConfig;
use qfmux::presets::log_psnr_spread_set;
use qfmux::sim::{Scenario, World};
use qfmux::source::ParamNoiseSpec;

fn world_at_eq(gains: ControllerGains) -> (World, Vec<f64>) {
    let set = log_psnr_spread_set();
    let mut sc = Scenario::uniform(&set, ParamNoiseSpec::frozen(), 4000.0, 1000, Policy::Qf);
    sc.gains = gains;
    let eq = solve_equilibrium(&set, 4000.0, &gains, &sc.plant, &sc.limits).unwrap();
    let w = World::at_equilibrium(sc, &eq).unwrap();
    let x = w.state_vector();
    (w, x)
}

fn step_from(gains: ControllerGains, x: &[f64]) -> Vec<f64> {
    let (mut w, _) = world_at_eq(gains);
    w.set_state_vector(x).unwrap();
    w.step().unwrap();
    w.state_vector()
}

fn check_jacobian(gains: ControllerGains) {
    let set = log_psnr_spread_set();
    let plant = PlantConfig::default();
    let (_, x0) = world_at_eq(gains);
    let eq = solve_equilibrium(&set, 4000.0, &gains, &plant, &RateLimits::default()).unwrap();
    let model = assemble_a(&gains, &set, &eq.r_eq, &plant).unwrap();
    let lay = StateLayout::new(6, gains.mode);
    let n = x0.len();
    for k in 0..n {
        // Single-component moves of the fairness accumulators leave the zero-sum
        // manifold the allocator lives on, so move them in pairs.
        let mut dir = vec![0.0; n];
        dir[k] = 1.0;
        let in_phi = k >= lay.phi() && k < lay.phi() + 6;
        if in_phi {
            if k == lay.phi() + 5 {
                continue;
            }
            dir[lay.phi() + 5] = -1.0;
        }
        let h = 1e-6 * x0[k].abs().max(1.0);
        let xp: Vec<f64> = x0.iter().zip(&dir).map(|(x, d)| x + h * d).collect();
        let xm: Vec<f64> = x0.iter().zip(&dir).map(|(x, d)| x - h * d).collect();
        let (fp, fm) = (step_from(gains, &xp), step_from(gains, &xm));
        let ad = model.a.mul_vec(&dir);
        for i in 0..n {
            let fd = (fp[i] - fm[i]) / (2.0 * h);
            let scale = ad[i].abs().max(1e-3 * x0[i].abs().max(1.0));
            assert!((fd - ad[i]).abs() <= 1e-4 * scale, "row {i} col {k}: finite difference {fd}, model {}", ad[i]);
        }
    }
}

#[test]
fn delay_mode_matrix_is_the_step_jacobian() {
    check_jacobian(ControllerGains::reference_delay());
}

#[test]
fn buffer_mode_matrix_is_the_step_jacobian() {
    let g = ControllerGains { mode: ControlMode::BufferLevel, kp_t: 66.0, ki_t: 2.6, kp_e: 0.1, ki_e: 0.01 };
    check_jacobian(g);
}

#[test]
fn equilibrium_is_a_fixed_point() {
    let (mut w, x0) = world_at_eq(ControllerGains::reference_delay());
    for _ in 0..100 {
        w.step().unwrap();
        for (a, b) in w.state_vector().iter().zip(&x0) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}
