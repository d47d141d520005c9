//! Box-constrained Nelder–Mead.
//!
//! Vertices are clamped into the box after every move. Convergence is
//! declared when every vertex lies within `x_tol * step` of the best one in
//! every coordinate, or when the objective spread over the simplex drops
//! below `f_tol` relative to the best value. The search is then restarted
//! once from the best point to guard against a collapsed simplex.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMead {
    pub x_tol: f64,
    pub f_tol: f64,
    pub max_evaluations: usize,
}

impl Default for NelderMead {
    fn default() -> Self {
        NelderMead {
            x_tol: 1e-4,
            f_tol: 1e-10,
            max_evaluations: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evaluations: usize,
    pub converged: bool,
}

struct Counted<'a, F> {
    f: &'a mut F,
    count: usize,
}

impl<F: FnMut(&[f64]) -> f64> Counted<'_, F> {
    fn eval(&mut self, x: &[f64]) -> f64 {
        self.count += 1;
        let v = (self.f)(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }
}

fn clamp_into(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, lo), hi) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(*lo, *hi);
    }
}

impl NelderMead {
    pub fn minimize<F: FnMut(&[f64]) -> f64>(
        &self,
        mut f: F,
        x0: &[f64],
        steps: &[f64],
        lower: &[f64],
        upper: &[f64],
    ) -> Minimum {
        let n = x0.len();
        assert!(steps.len() == n && lower.len() == n && upper.len() == n);
        let mut obj = Counted { f: &mut f, count: 0 };
        let mut start = x0.to_vec();
        clamp_into(&mut start, lower, upper);
        if n == 0 {
            let v = obj.eval(&start);
            return Minimum {
                x: start,
                f: v,
                evaluations: obj.count,
                converged: true,
            };
        }
        let mut best = (start.clone(), f64::INFINITY);
        for round in 0..2 {
            let (x, v, converged) = self.run(&mut obj, &best.0, steps, lower, upper);
            let improved = best.1 - v;
            if v < best.1 {
                best = (x, v);
            }
            if !converged {
                return Minimum {
                    x: best.0,
                    f: best.1,
                    evaluations: obj.count,
                    converged: false,
                };
            }
            if round > 0 && improved.abs() <= self.f_tol * v.abs() {
                break;
            }
        }
        Minimum {
            x: best.0,
            f: best.1,
            evaluations: obj.count,
            converged: true,
        }
    }

    fn run<F: FnMut(&[f64]) -> f64>(
        &self,
        obj: &mut Counted<'_, F>,
        x0: &[f64],
        steps: &[f64],
        lower: &[f64],
        upper: &[f64],
    ) -> (Vec<f64>, f64, bool) {
        let n = x0.len();
        let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        simplex.push(x0.to_vec());
        for i in 0..n {
            let mut v = x0.to_vec();
            v[i] += steps[i];
            if v[i] > upper[i] {
                v[i] = x0[i] - steps[i];
            }
            clamp_into(&mut v, lower, upper);
            simplex.push(v);
        }
        let mut values: Vec<f64> = simplex.iter().map(|v| obj.eval(v)).collect();

        loop {
            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            simplex = order.iter().map(|&k| simplex[k].clone()).collect();
            values = order.iter().map(|&k| values[k]).collect();

            let spread = values[n] - values[0];
            let tight = simplex[1..].iter().all(|v| {
                v.iter()
                    .zip(&simplex[0])
                    .zip(steps)
                    .all(|((a, b), s)| (a - b).abs() <= self.x_tol * s.abs())
            });
            if tight || spread.abs() <= self.f_tol * values[0].abs() {
                return (simplex[0].clone(), values[0], true);
            }
            if obj.count >= self.max_evaluations {
                return (simplex[0].clone(), values[0], false);
            }

            let centroid: Vec<f64> = (0..n)
                .map(|i| simplex[..n].iter().map(|v| v[i]).sum::<f64>() / n as f64)
                .collect();
            let toward = |t: f64| {
                let mut p: Vec<f64> = (0..n).map(|i| centroid[i] + t * (simplex[n][i] - centroid[i])).collect();
                clamp_into(&mut p, lower, upper);
                p
            };
            let reflected = toward(-1.0);
            let fr = obj.eval(&reflected);
            if fr < values[0] {
                let expanded = toward(-2.0);
                let fe = obj.eval(&expanded);
                if fe < fr {
                    simplex[n] = expanded;
                    values[n] = fe;
                } else {
                    simplex[n] = reflected;
                    values[n] = fr;
                }
                continue;
            }
            if fr < values[n - 1] {
                simplex[n] = reflected;
                values[n] = fr;
                continue;
            }
            let (contracted, fc) = if fr < values[n] {
                let p = toward(-0.5);
                let v = obj.eval(&p);
                (p, v)
            } else {
                let p = toward(0.5);
                let v = obj.eval(&p);
                (p, v)
            };
            if fc < values[n].min(fr) {
                simplex[n] = contracted;
                values[n] = fc;
                continue;
            }
            for k in 1..=n {
                let mut p: Vec<f64> = (0..n).map(|i| simplex[0][i] + 0.5 * (simplex[k][i] - simplex[0][i])).collect();
                clamp_into(&mut p, lower, upper);
                values[k] = obj.eval(&p);
                simplex[k] = p;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let nm = NelderMead {
            x_tol: 1e-8,
            f_tol: 1e-14,
            ..Default::default()
        };
        let r = nm.minimize(
            |x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
            &[-1.2, 1.0],
            &[0.5, 0.5],
            &[-5.0, -5.0],
            &[5.0, 5.0],
        );
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4, "{:?}", r.x);
    }

    #[test]
    fn respects_bounds() {
        let r = NelderMead::default().minimize(|x| (x[0] + 3.0).powi(2), &[1.0], &[0.5], &[0.0], &[2.0]);
        assert!(r.converged);
        assert!(r.x[0].abs() < 1e-3, "{:?}", r.x);
    }

    #[test]
    fn budget_exhaustion() {
        let nm = NelderMead {
            max_evaluations: 10,
            x_tol: 1e-12,
            f_tol: 0.0,
        };
        let r = nm.minimize(|x| x.iter().map(|v| v * v).sum(), &[3.0, 3.0, 3.0], &[1.0; 3], &[-9.0; 3], &[9.0; 3]);
        assert!(!r.converged);
        assert!(r.evaluations >= 10);
    }

    #[test]
    fn nan_treated_as_worst() {
        let r = NelderMead::default().minimize(
            |x| if x[0] < 0.0 { f64::NAN } else { (x[0] - 1.0).powi(2) },
            &[0.5],
            &[0.3],
            &[-2.0],
            &[4.0],
        );
        assert!((r.x[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn zero_dimensional() {
        let r = NelderMead::default().minimize(|_| 4.0, &[], &[], &[], &[]);
        assert_eq!(r.f, 4.0);
        assert_eq!(r.evaluations, 1);
    }
}
