//! Accelerated proximal gradient for penalized logistic regression with
//! hospital, category and socio-demographic terms.

use crate::data::{map_to_categories, Dataset};
use crate::error::{Error, Result};
use crate::util::{sigmoid, softplus};

/// Sparse design over a subset of records.
pub(crate) struct Design {
    pub n: usize,
    pub hospitals: usize,
    pub n_categories: usize,
    pub sociodem_dim: usize,
    hospital: Vec<u32>,
    cat_start: Vec<usize>,
    cats: Vec<u32>,
    z: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
}

impl Design {
    pub fn build(dataset: &Dataset, indices: &[usize], weights: (f64, f64)) -> Result<Design> {
        let m = dataset.sociodem_dim;
        let mut d = Design {
            n: indices.len(),
            hospitals: dataset.hospitals,
            n_categories: dataset.n_categories,
            sociodem_dim: m,
            hospital: Vec::with_capacity(indices.len()),
            cat_start: Vec::with_capacity(indices.len() + 1),
            cats: Vec::new(),
            z: Vec::with_capacity(indices.len() * m),
            y: Vec::with_capacity(indices.len()),
            w: Vec::with_capacity(indices.len()),
        };
        d.cat_start.push(0);
        for &i in indices {
            let r = &dataset.records[i];
            if r.sociodem.len() != m {
                return Err(Error::Shape(format!("admission {} has {} features, expected {m}", r.admission_id, r.sociodem.len())));
            }
            if r.hospital >= dataset.hospitals {
                return Err(Error::InvalidInput(format!("admission {} has hospital {}", r.admission_id, r.hospital)));
            }
            d.hospital.push(r.hospital as u32);
            d.cats.extend(map_to_categories(r, &dataset.category_map, dataset.n_categories)?.ones);
            d.cat_start.push(d.cats.len());
            d.z.extend_from_slice(&r.sociodem);
            let y = r.outcome as f64;
            d.y.push(y);
            d.w.push(if r.outcome == 1 { weights.0 } else { weights.1 });
        }
        Ok(d)
    }

    /// Parameter layout: `[bias, alpha (K), beta (C + M)]`.
    pub fn dim(&self) -> usize {
        1 + self.hospitals + self.n_categories + self.sociodem_dim
    }

    fn beta_offset(&self) -> usize {
        1 + self.hospitals
    }

    fn eta(&self, theta: &[f64], i: usize) -> f64 {
        let b = self.beta_offset();
        let mut eta = theta[0] + theta[1 + self.hospital[i] as usize];
        for &c in &self.cats[self.cat_start[i]..self.cat_start[i + 1]] {
            eta += theta[b + c as usize];
        }
        let zoff = b + self.n_categories;
        for (j, &z) in self.z[i * self.sociodem_dim..(i + 1) * self.sociodem_dim].iter().enumerate() {
            eta += theta[zoff + j] * z;
        }
        eta
    }

    /// Summed weighted cross-entropy, on the logit scale.
    pub fn loss_sum(&self, theta: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let mut total = 0.0;
        match grad {
            None => {
                for i in 0..self.n {
                    let eta = self.eta(theta, i);
                    total += self.w[i] * (softplus(eta) - self.y[i] * eta);
                }
            }
            Some(g) => {
                g.fill(0.0);
                let b = self.beta_offset();
                let zoff = b + self.n_categories;
                for i in 0..self.n {
                    let eta = self.eta(theta, i);
                    total += self.w[i] * (softplus(eta) - self.y[i] * eta);
                    let r = self.w[i] * (sigmoid(eta) - self.y[i]);
                    g[0] += r;
                    g[1 + self.hospital[i] as usize] += r;
                    for &c in &self.cats[self.cat_start[i]..self.cat_start[i + 1]] {
                        g[b + c as usize] += r;
                    }
                    for (j, &z) in self.z[i * self.sociodem_dim..(i + 1) * self.sociodem_dim].iter().enumerate() {
                        g[zoff + j] += r * z;
                    }
                }
            }
        }
        total
    }

    pub fn records_per_hospital(&self) -> Vec<usize> {
        let mut c = vec![0; self.hospitals];
        for &h in &self.hospital {
            c[h as usize] += 1;
        }
        c
    }
}

pub fn soft_threshold(x: f64, t: f64) -> f64 {
    x.signum() * (x.abs() - t).max(0.0)
}

pub(crate) struct Problem<'a> {
    pub design: &'a Design,
    pub lambda1: f64,
    pub lambda2: f64,
    pub penalize_beta: bool,
    pub fit_beta: bool,
}

pub(crate) struct Solution {
    pub theta: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub grad_map_norm: f64,
    /// Objective after every accepted step, starting at the initial point.
    pub trace: Vec<f64>,
}

impl Problem<'_> {
    fn l2_end(&self) -> usize {
        if self.penalize_beta {
            self.design.dim()
        } else {
            self.design.beta_offset()
        }
    }

    /// Smooth part of the per-record mean objective.
    fn smooth(&self, theta: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let n = self.design.n as f64;
        let end = self.l2_end();
        let pen: f64 = theta[1..end].iter().map(|v| v * v).sum();
        match grad {
            None => (self.design.loss_sum(theta, None) + self.lambda2 * pen) / n,
            Some(g) => {
                let f = self.design.loss_sum(theta, Some(g));
                for j in 1..end {
                    g[j] += 2.0 * self.lambda2 * theta[j];
                }
                g.iter_mut().for_each(|v| *v /= n);
                (f + self.lambda2 * pen) / n
            }
        }
    }

    fn nonsmooth(&self, theta: &[f64]) -> f64 {
        let b = self.design.beta_offset();
        self.lambda1 * theta[b..].iter().map(|v| v.abs()).sum::<f64>() / self.design.n as f64
    }

    pub fn objective(&self, theta: &[f64]) -> f64 {
        self.smooth(theta, None) + self.nonsmooth(theta)
    }

    fn prox(&self, v: &mut [f64], step: f64) {
        let b = self.design.beta_offset();
        if !self.fit_beta {
            v[b..].fill(0.0);
            return;
        }
        if self.lambda1 > 0.0 {
            let t = self.lambda1 * step / self.design.n as f64;
            v[b..].iter_mut().for_each(|x| *x = soft_threshold(*x, t));
        }
    }

    /// Monotone accelerated proximal gradient with backtracking and
    /// function-value restarts. Stops when the gradient mapping norm falls
    /// below `tol`.
    pub fn solve(&self, init: Vec<f64>, max_iter: usize, tol: f64) -> Solution {
        let dim = self.design.dim();
        let mut x = init;
        self.prox(&mut x, 0.0);
        let mut fx = self.objective(&x);
        let mut trace = vec![fx];
        let mut y = x.clone();
        let mut t = 1.0f64;
        let mut lip = 1.0f64;
        let mut grad = vec![0.0; dim];
        let mut z = vec![0.0; dim];
        let mut gmap = f64::INFINITY;
        // y == x: a backtracked proximal step from x cannot increase the
        // objective in exact arithmetic, so only rounding can reject it
        let mut restarted = true;
        for iter in 0..max_iter {
            let fy = self.smooth(&y, Some(&mut grad));
            let (fz, d2) = loop {
                for j in 0..dim {
                    z[j] = y[j] - grad[j] / lip;
                }
                self.prox(&mut z, 1.0 / lip);
                let fz = self.smooth(&z, None);
                let mut lin = 0.0;
                let mut d2 = 0.0;
                for j in 0..dim {
                    let d = z[j] - y[j];
                    lin += grad[j] * d;
                    d2 += d * d;
                }
                if fz <= fy + lin + 0.5 * lip * d2 + 1e-15 * fy.abs() || lip > 1e30 {
                    break (fz, d2);
                }
                lip *= 2.0;
            };
            gmap = lip * d2.sqrt();
            if gmap < tol {
                let fz_total = fz + self.nonsmooth(&z);
                if fz_total <= fx || restarted {
                    x.copy_from_slice(&z);
                    trace.push(fz_total);
                }
                return Solution { theta: x, iterations: iter + 1, converged: true, grad_map_norm: gmap, trace };
            }
            let fz_total = fz + self.nonsmooth(&z);
            if fz_total <= fx || restarted {
                let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
                let momentum = (t - 1.0) / t_next;
                for j in 0..dim {
                    y[j] = z[j] + momentum * (z[j] - x[j]);
                }
                x.copy_from_slice(&z);
                fx = fz_total;
                trace.push(fx);
                t = t_next;
                lip *= 0.9;
                restarted = false;
            } else {
                t = 1.0;
                y.copy_from_slice(&x);
                restarted = true;
            }
        }
        Solution { theta: x, iterations: max_iter, converged: false, grad_map_norm: gmap, trace }
    }
}
