//! Geometric multigrid preconditioner for the smoothing system.
//!
//! The edge weights span four orders of magnitude (1/ε² on flat regions),
//! which welds pixels into nearly-rigid plateaus; single-level
//! preconditioners then leave CG crawling through plateau-coupling modes.
//! Coarsening by piecewise-constant aggregation of 2×2 blocks is exact
//! Galerkin here: the coarse operator is again `diag(c) + λ·L` with the
//! identity mass summed per block and the crossing edge weights summed
//! pairwise, so plateaus stay plateaus on every level.
//!
//! One V(1,1) cycle — forward Gauss-Seidel down, exact dense solve on the
//! coarsest grid, backward Gauss-Seidel up — is a fixed symmetric
//! positive-definite operator, as preconditioned CG requires.

use super::SmoothingSystem;

/// One grid level: `A_l = diag(mass) + λ·(Dxᵀ·diag(wx)·Dx + Dyᵀ·diag(wy)·Dy)`.
struct Level {
    height: usize,
    width: usize,
    mass: Vec<f64>,
    wx: Vec<f64>,
    wy: Vec<f64>,
    lambda: f64,
    /// Row diagonal, precomputed for the smoother.
    diag: Vec<f64>,
}

impl Level {
    fn build_diag(&mut self) {
        let (h, w) = (self.height, self.width);
        let mut d = self.mass.clone();
        for y in 0..h {
            for x in 0..w.saturating_sub(1) {
                let we = self.lambda * self.wx[y * (w - 1) + x];
                d[y * w + x] += we;
                d[y * w + x + 1] += we;
            }
        }
        for y in 0..h.saturating_sub(1) {
            for x in 0..w {
                let we = self.lambda * self.wy[y * w + x];
                d[y * w + x] += we;
                d[(y + 1) * w + x] += we;
            }
        }
        self.diag = d;
    }

    fn apply(&self, s: &[f64], out: &mut [f64]) {
        let (h, w) = (self.height, self.width);
        for (o, (&si, &mi)) in out.iter_mut().zip(s.iter().zip(self.mass.iter())) {
            *o = si * mi;
        }
        for y in 0..h {
            for x in 0..w.saturating_sub(1) {
                let p = y * w + x;
                let d = self.lambda * self.wx[y * (w - 1) + x] * (s[p] - s[p + 1]);
                out[p] += d;
                out[p + 1] -= d;
            }
        }
        for y in 0..h.saturating_sub(1) {
            for x in 0..w {
                let p = y * w + x;
                let d = self.lambda * self.wy[y * w + x] * (s[p] - s[p + w]);
                out[p] += d;
                out[p + w] -= d;
            }
        }
    }

    /// One Gauss-Seidel sweep of `A x = b`; `forward` fixes the scan
    /// order (the backward sweep is its adjoint).
    fn gauss_seidel(&self, x: &mut [f64], b: &[f64], forward: bool) {
        let (h, w) = (self.height, self.width);
        let lam = self.lambda;
        let update = |x: &mut [f64], y: usize, xx: usize| {
            let p = y * w + xx;
            let mut rhs = b[p];
            if xx > 0 {
                rhs += lam * self.wx[y * (w - 1) + xx - 1] * x[p - 1];
            }
            if xx + 1 < w {
                rhs += lam * self.wx[y * (w - 1) + xx] * x[p + 1];
            }
            if y > 0 {
                rhs += lam * self.wy[(y - 1) * w + xx] * x[p - w];
            }
            if y + 1 < h {
                rhs += lam * self.wy[y * w + xx] * x[p + w];
            }
            x[p] = rhs / self.diag[p];
        };
        if forward {
            for y in 0..h {
                for xx in 0..w {
                    update(x, y, xx);
                }
            }
        } else {
            for y in (0..h).rev() {
                for xx in (0..w).rev() {
                    update(x, y, xx);
                }
            }
        }
    }

    /// Galerkin coarse level under piecewise-constant 2×2 aggregation.
    fn coarsen(&self) -> Level {
        let (h, w) = (self.height, self.width);
        let ch = h.div_ceil(2);
        let cw = w.div_ceil(2);
        let mut mass = vec![0.0f64; ch * cw];
        for y in 0..h {
            for x in 0..w {
                mass[(y / 2) * cw + x / 2] += self.mass[y * w + x];
            }
        }
        // A fine x-edge joins coarse cells (x/2, (x+1)/2): interior to a
        // block when both land in the same coarse cell, otherwise it adds
        // to the coarse crossing weight.
        let mut wx = vec![0.0f64; ch * cw.saturating_sub(1)];
        for y in 0..h {
            for x in 0..w.saturating_sub(1) {
                if x / 2 != (x + 1) / 2 {
                    wx[(y / 2) * (cw - 1) + x / 2] += self.wx[y * (w - 1) + x];
                }
            }
        }
        let mut wy = vec![0.0f64; ch.saturating_sub(1) * cw];
        for y in 0..h.saturating_sub(1) {
            for x in 0..w {
                if y / 2 != (y + 1) / 2 {
                    wy[(y / 2) * cw + x / 2] += self.wy[y * w + x];
                }
            }
        }
        let mut level = Level {
            height: ch,
            width: cw,
            mass,
            wx,
            wy,
            lambda: self.lambda,
            diag: Vec::new(),
        };
        level.build_diag();
        level
    }

    /// Dense Cholesky of the level's matrix, for the coarsest grid.
    fn dense_factor(&self) -> DenseCholesky {
        let (h, w) = (self.height, self.width);
        let n = h * w;
        let mut a = vec![0.0f64; n * n];
        for (p, &d) in self.diag.iter().enumerate() {
            a[p * n + p] = d;
        }
        for y in 0..h {
            for x in 0..w.saturating_sub(1) {
                let p = y * w + x;
                let v = -self.lambda * self.wx[y * (w - 1) + x];
                a[p * n + p + 1] = v;
                a[(p + 1) * n + p] = v;
            }
        }
        for y in 0..h.saturating_sub(1) {
            for x in 0..w {
                let p = y * w + x;
                let v = -self.lambda * self.wy[y * w + x];
                a[p * n + p + w] = v;
                a[(p + w) * n + p] = v;
            }
        }
        DenseCholesky::factor(a, n)
    }
}

/// Plain dense Cholesky `A = L·Lᵀ` for the coarsest grid (a few dozen
/// unknowns).
struct DenseCholesky {
    l: Vec<f64>,
    n: usize,
}

impl DenseCholesky {
    fn factor(mut a: Vec<f64>, n: usize) -> Self {
        for k in 0..n {
            let mut d = a[k * n + k];
            for j in 0..k {
                d -= a[k * n + j] * a[k * n + j];
            }
            let d = d.max(1.0e-300).sqrt();
            a[k * n + k] = d;
            for i in k + 1..n {
                let mut v = a[i * n + k];
                for j in 0..k {
                    v -= a[i * n + j] * a[k * n + j];
                }
                a[i * n + k] = v / d;
            }
        }
        Self { l: a, n }
    }

    fn solve(&self, b: &[f64], x: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let mut v = b[i];
            for j in 0..i {
                v -= self.l[i * n + j] * x[j];
            }
            x[i] = v / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut v = x[i];
            for j in i + 1..n {
                v -= self.l[j * n + i] * x[j];
            }
            x[i] = v / self.l[i * n + i];
        }
    }
}

/// The assembled preconditioner: a fixed V(1,1) cycle.
pub(super) struct Multigrid {
    levels: Vec<Level>,
    coarse: DenseCholesky,
    /// Scratch (solution, rhs, residual) triplet per level.
    work: std::cell::RefCell<Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>>,
}

/// Stop coarsening once both extents fit the dense solver comfortably.
const COARSEST: usize = 4;

impl Multigrid {
    pub(super) fn build(system: &SmoothingSystem) -> Self {
        let mut fine = Level {
            height: system.height,
            width: system.width,
            mass: vec![1.0; system.height * system.width],
            wx: system.wx.clone(),
            wy: system.wy.clone(),
            lambda: system.lambda,
            diag: Vec::new(),
        };
        fine.build_diag();
        let mut levels = vec![fine];
        while levels.last().unwrap().height.max(levels.last().unwrap().width) > COARSEST {
            let next = levels.last().unwrap().coarsen();
            levels.push(next);
        }
        let coarse = levels.last().unwrap().dense_factor();
        let work = levels
            .iter()
            .map(|l| {
                let n = l.height * l.width;
                (vec![0.0; n], vec![0.0; n], vec![0.0; n])
            })
            .collect();
        Self { levels, coarse, work: std::cell::RefCell::new(work) }
    }

    /// `z ≈ A⁻¹ r` by one V-cycle.
    pub(super) fn apply(&self, r: &[f64], z: &mut [f64]) {
        let mut work = self.work.borrow_mut();
        work[0].1.copy_from_slice(r);
        self.cycle(0, &mut work);
        z.copy_from_slice(&work[0].0);
    }

    fn cycle(&self, li: usize, work: &mut [(Vec<f64>, Vec<f64>, Vec<f64>)]) {
        let level = &self.levels[li];
        let n = level.height * level.width;
        if li + 1 == self.levels.len() {
            let (x, b, _) = &mut work[li];
            self.coarse.solve(b, x);
            return;
        }
        {
            let (x, b, res) = &mut work[li];
            x[..n].iter_mut().for_each(|v| *v = 0.0);
            level.gauss_seidel(x, b, true);
            level.apply(x, res);
            for i in 0..n {
                res[i] = b[i] - res[i];
            }
        }
        // Restrict the residual: piecewise-constant aggregation sums over
        // each 2×2 block.
        {
            let cw = self.levels[li + 1].width;
            let (left, right) = work.split_at_mut(li + 1);
            let res = &left[li].2;
            let rhs_c = &mut right[0].1;
            rhs_c.iter_mut().for_each(|v| *v = 0.0);
            for y in 0..level.height {
                for x in 0..level.width {
                    rhs_c[(y / 2) * cw + x / 2] += res[y * level.width + x];
                }
            }
        }
        self.cycle(li + 1, work);
        {
            let cw = self.levels[li + 1].width;
            let (left, right) = work.split_at_mut(li + 1);
            let xc = &right[0].0;
            let (x, b, _) = &mut left[li];
            for y in 0..level.height {
                for xx in 0..level.width {
                    x[y * level.width + xx] += xc[(y / 2) * cw + xx / 2];
                }
            }
            level.gauss_seidel(x, b, false);
        }
    }
}
