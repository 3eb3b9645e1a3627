use std::path::PathBuf;

use bfm_core::ensemble::{perturb_scenario, PerturbationSpec};
use bfm_core::files::load_scenario;
use bfm_core::scenario::Scenario;
use bfm_core::solver::Simulation;
use bfm_core::units::Side;

fn shipped(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/gettysburg").join(name);
    load_scenario(&path).unwrap()
}

#[test]
fn brigade_order_of_battle() {
    let s = shipped("brigade.toml");
    assert_eq!(s.units.len(), 21);
    assert_eq!(s.artillery.len(), 36);
    assert_eq!(s.infantry_totals(), (8036.0, 11481.0));
    let blue = s.units.iter().filter(|u| u.side == Side::Blue).count();
    assert_eq!(blue, 10);
    assert!(s.params.dt <= s.params.dt_limit(s.map.grid.ds));
}

#[test]
fn army_keeps_brigade_totals() {
    let s = shipped("army.toml");
    assert_eq!(s.units.len(), 2);
    assert_eq!(s.infantry_totals(), (8036.0, 11481.0));
    assert_eq!(s.map.grid, shipped("brigade.toml").map.grid);
}

#[test]
fn shipped_terrain_is_uneven_and_slowed() {
    let s = shipped("brigade.toml");
    let (lo, hi) = (s.map.elevation.min(), s.map.elevation.max());
    assert!(hi - lo > 10.0, "relief {lo}..{hi}");
    assert!(s.map.overlay.min() < 0.8);
    assert!(s.map.overlay.max() <= 1.0);
}

#[test]
fn perturbed_brigades_start_cleanly() {
    let base = shipped("brigade.toml");
    let spec = PerturbationSpec::default();
    for case in [1, 2, 17, 777] {
        let s = perturb_scenario(&base, case, &spec).unwrap();
        let (blue, red) = s.infantry_totals();
        assert!(blue > 0.75 * 8036.0 && blue < 1.25 * 8036.0, "case {case}: {blue}");
        assert!(red > 0.75 * 11481.0 && red < 1.25 * 11481.0, "case {case}: {red}");
        let sim = Simulation::new(s, 1).unwrap();
        let placed: f64 = sim.summaries().iter().map(|u| u.strength).sum();
        assert!((placed - blue - red).abs() < 1e-6 * (blue + red), "case {case}");
    }
}
