//! Writes the schematic elevation raster used by the shipped Gettysburg terrain.
//!
//! Two north-south ridges (Seminary in the west, Cemetery in the east) over a
//! gently sloping valley, a low rise under the Emmitsburg Road and the shoulder
//! of Cemetery Hill in the north-east corner.
//!
//! ```text
//! cargo run -p bfm-core --example gettysburg_elevation -- data/gettysburg/elevation.bin
//! ```

use std::path::PathBuf;

use bfm_core::files::write_f64_raster;
use bfm_core::geom::Vec2;
use bfm_core::terrain::{Grid, Raster};

pub const NX: usize = 384;
pub const NY: usize = 309;
pub const DS: f64 = 8.0;

fn ridge(offset: f64, width: f64) -> f64 {
    (-(offset / width).powi(2)).exp()
}

/// Elevation (m) at map point `(x, y)`.
pub fn elevation(x: f64, y: f64) -> f64 {
    let valley = 150.0 + 0.002 * y;
    let seminary = 14.0 * ridge(x - (900.0 + 0.05 * (y - 1200.0)), 380.0);
    let cemetery = 13.0 * ridge(x - (2480.0 - 0.03 * (y - 1200.0)), 330.0);
    let road_x = 1700.0 + 0.2225 * y;
    let road = 3.0 * ridge(x - road_x, 120.0);
    let hill = 10.0 * ridge(Vec2::new(x, y).distance(Vec2::new(2800.0, 2600.0)), 500.0);
    valley + seminary + cemetery + road + hill
}

fn main() {
    let out: PathBuf = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/gettysburg/elevation.bin"));
    let grid = Grid::new(NX, NY, DS, Vec2::ZERO).expect("grid");
    let h = Raster::from_fn(&grid, |i, j| {
        let c = grid.center(i, j);
        elevation(c.x, c.y)
    });
    write_f64_raster(&out, &h).expect("write elevation");
    println!("{} ({} x {}, {:.1} .. {:.1} m)", out.display(), NX, NY, h.min(), h.max());
}
