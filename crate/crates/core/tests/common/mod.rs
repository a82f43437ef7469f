//! Helpers shared by the integration and acceptance tests.
#![allow(dead_code)]

use fluoro_recon::fgrn::{total_loss, FgrnModel, LossWeights, Mode};
use fluoro_recon::skeleton::*;
use rand::Rng;

/// Union of random discs and rectangles.
pub fn random_blob(rng: &mut impl Rng, w: usize, h: usize) -> BinaryMask {
    let mut m = BinaryMask::new(w, h);
    for _ in 0..rng.gen_range(1..5) {
        let (cr, cc) = (rng.gen_range(0..h) as f64, rng.gen_range(0..w) as f64);
        if rng.gen_bool(0.5) {
            let r = rng.gen_range(1.0..(w.min(h) as f64 / 3.0).max(1.5));
            for row in 0..h {
                for col in 0..w {
                    if (row as f64 - cr).powi(2) + (col as f64 - cc).powi(2) <= r * r {
                        m.set(row, col, true);
                    }
                }
            }
        } else {
            let (hh, hw) = (rng.gen_range(0..h / 3 + 1), rng.gen_range(0..w / 3 + 1));
            for row in (cr as usize).saturating_sub(hh)..(cr as usize + hh + 1).min(h) {
                for col in (cc as usize).saturating_sub(hw)..(cc as usize + hw + 1).min(w) {
                    m.set(row, col, true);
                }
            }
        }
    }
    m
}

/// A random 8-connected tree of pixels grown from a seed pixel.
pub fn random_tree(rng: &mut impl Rng, w: usize, h: usize, size: usize) -> BinaryMask {
    let mut m = BinaryMask::new(w, h);
    let mut cells = vec![(rng.gen_range(0..h), rng.gen_range(0..w))];
    m.set(cells[0].0, cells[0].1, true);
    for _ in 0..size * 20 {
        if cells.len() >= size {
            break;
        }
        let (r, c) = cells[rng.gen_range(0..cells.len())];
        let (dr, dc) = (rng.gen_range(-1i64..=1), rng.gen_range(-1i64..=1));
        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
        if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
            continue;
        }
        let (nr, nc) = (nr as usize, nc as usize);
        // Keep it one pixel wide: the new cell may touch only its parent.
        if !m.get(nr, nc) && m.neighbour_count(nr, nc) == 1 {
            m.set(nr, nc, true);
            cells.push((nr, nc));
        }
    }
    m
}

fn step(a: (usize, usize), b: (usize, usize)) -> f64 {
    if a.0 != b.0 && a.1 != b.1 {
        std::f64::consts::SQRT_2
    } else {
        1.0
    }
}

fn neighbours(m: &BinaryMask, (r, c): (usize, usize)) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for dr in -1i64..=1 {
        for dc in -1i64..=1 {
            if (dr, dc) != (0, 0) && m.get_signed(r as isize + dr as isize, c as isize + dc as isize) {
                out.push(((r as i64 + dr) as usize, (c as i64 + dc) as usize));
            }
        }
    }
    out
}

/// Enumerates simple paths from `start`, recording the shortest length to
/// every pixel reached. Returns `None` when the enumeration budget runs out.
fn enumerate_from(m: &BinaryMask, start: (usize, usize), budget: &mut usize) -> Option<Vec<f64>> {
    let w = m.width();
    let mut best = vec![f64::INFINITY; w * m.height()];
    let mut visited = vec![false; w * m.height()];
    fn dfs(
        m: &BinaryMask,
        at: (usize, usize),
        len: f64,
        visited: &mut Vec<bool>,
        best: &mut Vec<f64>,
        budget: &mut usize,
    ) -> bool {
        if *budget == 0 {
            return false;
        }
        *budget -= 1;
        let i = at.0 * m.width() + at.1;
        best[i] = best[i].min(len);
        visited[i] = true;
        for nb in neighbours(m, at) {
            let j = nb.0 * m.width() + nb.1;
            if !visited[j] && !dfs(m, nb, len + step(at, nb), visited, best, budget) {
                return false;
            }
        }
        visited[i] = false;
        true
    }
    dfs(m, start, 0.0, &mut visited, &mut best, budget).then_some(best)
}

/// Maximum over endpoint pairs of the shortest connecting path.
pub fn brute_force_longest(m: &BinaryMask) -> Option<f64> {
    let ends = find_endpoints(m);
    let mut budget = 2_000_000;
    let mut longest: f64 = 0.0;
    for &s in &ends {
        let best = enumerate_from(m, s, &mut budget)?;
        for &e in &ends {
            longest = longest.max(best[e.0 * m.width() + e.1]);
        }
    }
    Some(longest)
}

/// Central-difference gradient check: every parameter must satisfy
/// `|a - f| <= max(1e-4 * max(|a|, |f|), 1e-6)`.
pub fn check_gradient(model: &FgrnModel, image: &[f64], y: &[f64], w: &LossWeights) -> Result<(), String> {
    let analytic = model.backward(image, y, w).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let loss = |m: &FgrnModel| total_loss(y, &m.forward(image, Mode::Eval).unwrap(), w);
    let mut probe = model.clone();
    for i in 0..model.num_params() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + h;
        let up = loss(&probe);
        probe.params_mut()[i] = orig - h;
        let down = loss(&probe);
        probe.params_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let a = analytic[i];
        let tol = (1e-4 * a.abs().max(fd.abs())).max(1e-6);
        if (a - fd).abs() > tol {
            return Err(format!("param {i}: analytic {a:e}, finite difference {fd:e}"));
        }
    }
    Ok(())
}

/// Zero biases can park a unit exactly on the ReLU kink, where finite
/// differences see a one-sided slope.
pub fn with_random_biases(mut model: FgrnModel, rng: &mut impl Rng) -> FgrnModel {
    let layers = model.architecture().conv.len() + model.architecture().hidden.len() + 1;
    for i in 0..layers {
        for b in model.layer_mut(i).1 {
            *b = rng.gen_range(-0.5..0.5);
        }
    }
    model
}
