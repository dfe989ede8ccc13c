//! Independent reference implementations used by several test targets.

use std::f64::consts::PI;

use matx_core::labels::Mask;
use matx_core::render::{MaterialMaps, RenderConfig};
use matx_core::rng::StreamRng;
use matx_core::Tensor;
use rand::Rng;

/// Written from the shading model, sharing nothing with the tape renderer.
pub fn oracle_pixel(m: &MaterialMaps<f64>, cfg: &RenderConfig, y: usize, x: usize) -> [f64; 3] {
    let size = m.size() as f64;
    let px = ((x as f64 + 0.5) / size - 0.5) * cfg.plane_extent;
    let py = (0.5 - (y as f64 + 0.5) / size) * cfg.plane_extent;
    let to_light = [-px, -py, cfg.light_height];
    let dist2 = to_light.iter().map(|v| v * v).sum::<f64>();
    let l = to_light.map(|v| v / dist2.sqrt());

    let (nx, ny) = (m.normal.at(0, y, x), m.normal.at(1, y, x));
    let nz = (1.0 - nx * nx - ny * ny).max(0.0).sqrt();
    let len = (nx * nx + ny * ny + nz * nz).sqrt();
    let n = [nx / len, ny / len, nz / len];
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    // light and view coincide, so the half vector is l itself
    let hv = l;

    let n_dot_l = dot(n, l);
    let c = n_dot_l.max(1e-4);
    let n_dot_h = dot(n, hv).max(0.0);
    let r = m.roughness.at(0, y, x).max(0.045);
    let a2 = r.powi(4);
    let d = a2 / (PI * (n_dot_h * n_dot_h * (a2 - 1.0) + 1.0).powi(2));
    let lambda = ((1.0 + a2 * (1.0 - c * c).max(0.0) / (c * c)).sqrt() - 1.0) / 2.0;
    let g = 1.0 / (1.0 + 2.0 * lambda);
    let schlick = (1.0 - dot(hv, l)).max(0.0).powi(5);
    let irradiance = n_dot_l.max(0.0) * cfg.light_intensity / dist2;
    std::array::from_fn(|k| {
        let f0 = m.specular.at(k, y, x);
        let f = f0 + (1.0 - f0) * schlick;
        let brdf = m.albedo.at(k, y, x) / PI + d * f * g / (4.0 * c * c);
        (brdf * irradiance).clamp(0.0, 1.0).powf(1.0 / cfg.gamma)
    })
}

pub fn random_maps(
    size: usize,
    rng: &mut StreamRng,
    max_radius: f64,
    min_rough: f64,
) -> MaterialMaps<f64> {
    let albedo = Tensor::uniform(&[3, size, size], 0.0, 1.0, rng);
    let hw = size * size;
    let mut normal = vec![0.0; 2 * hw];
    for i in 0..hw {
        let r = rng.random_range(0.0..max_radius);
        let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        normal[i] = r * a.cos();
        normal[hw + i] = r * a.sin();
    }
    let normal = Tensor::from_vec(&[2, size, size], normal).unwrap();
    let roughness = Tensor::uniform(&[1, size, size], min_rough, 1.0, rng);
    let specular = Tensor::uniform(&[3, size, size], 0.0, 1.0, rng);
    MaterialMaps::new(albedo, normal, roughness, specular).unwrap()
}

pub fn random_config(rng: &mut StreamRng) -> RenderConfig {
    RenderConfig {
        light_height: rng.random_range(0.5..2.0),
        light_intensity: rng.random_range(0.5..3.0),
        plane_extent: rng.random_range(0.5..2.0),
        gamma: rng.random_range(1.0..2.6),
        ..RenderConfig::default()
    }
}

/// A 4² material and light for finite differencing: normals away from the
/// disk edge, roughness above the floor, and a render strictly inside the
/// display clamp. Redraws until all three hold.
pub fn smooth_render_instance(rng: &mut StreamRng) -> (MaterialMaps<f64>, RenderConfig) {
    loop {
        let maps = random_maps(4, rng, 0.8, 0.1);
        let cfg = RenderConfig {
            light_intensity: 0.6,
            ..random_config(rng)
        };
        let img = matx_core::render::render(&maps, &cfg).unwrap();
        if img.data().iter().all(|&v| v > 1e-3 && v < 0.999) {
            return (maps, cfg);
        }
    }
}

pub fn sorted_l1(u: &[f64], v: &[f64]) -> f64 {
    let mut u = u.to_vec();
    let mut v = v.to_vec();
    u.sort_by(f64::total_cmp);
    v.sort_by(f64::total_cmp);
    u.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum::<f64>() / u.len() as f64
}

/// `E|X−Y| − ½E|X−X'| − ½E|Y−Y'|` over the empirical measures.
pub fn energy_distance(u: &[f64], v: &[f64]) -> f64 {
    let mean_abs = |a: &[f64], b: &[f64]| -> f64 {
        let mut s = 0.0;
        for x in a {
            for y in b {
                s += (x - y).abs();
            }
        }
        s / (a.len() * b.len()) as f64
    };
    mean_abs(u, v) - 0.5 * mean_abs(u, u) - 0.5 * mean_abs(v, v)
}

/// Pixel survives iff the whole `(2r+1)²` window lies inside the grid and is set.
pub fn erode_oracle(mask: &Mask, r: usize) -> Vec<bool> {
    let (h, w) = (mask.height() as isize, mask.width() as isize);
    let r = r as isize;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let mut keep = true;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy < 0 || xx < 0 || yy >= h || xx >= w || !mask.get(yy as usize, xx as usize)
                    {
                        keep = false;
                    }
                }
            }
            out.push(keep);
        }
    }
    out
}
