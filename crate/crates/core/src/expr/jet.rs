use nalgebra::{DMatrix, DVector};

/// Second-order jet: a value with its exact gradient and Hessian in `p` parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet2 {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

impl Jet2 {
    pub fn constant(value: f64, p: usize) -> Self {
        Jet2 {
            value,
            grad: DVector::zeros(p),
            hess: DMatrix::zeros(p, p),
        }
    }

    /// The independent variable `theta[index]`.
    pub fn variable(value: f64, index: usize, p: usize) -> Self {
        let mut j = Jet2::constant(value, p);
        j.grad[index] = 1.0;
        j
    }

    pub fn dim(&self) -> usize {
        self.grad.len()
    }

    /// Applies a scalar function given its value and first two derivatives at `self.value`.
    pub fn chain(&self, f0: f64, f1: f64, f2: f64) -> Jet2 {
        let p = self.dim();
        let grad = &self.grad * f1;
        let mut hess = DMatrix::zeros(p, p);
        for i in 0..p {
            for j in i..p {
                let h = f1 * self.hess[(i, j)] + f2 * self.grad[i] * self.grad[j];
                hess[(i, j)] = h;
                hess[(j, i)] = h;
            }
        }
        Jet2 {
            value: f0,
            grad,
            hess,
        }
    }

    pub fn add(&self, other: &Jet2) -> Jet2 {
        Jet2 {
            value: self.value + other.value,
            grad: &self.grad + &other.grad,
            hess: &self.hess + &other.hess,
        }
    }

    pub fn sub(&self, other: &Jet2) -> Jet2 {
        Jet2 {
            value: self.value - other.value,
            grad: &self.grad - &other.grad,
            hess: &self.hess - &other.hess,
        }
    }

    pub fn neg(&self) -> Jet2 {
        Jet2 {
            value: -self.value,
            grad: -&self.grad,
            hess: -&self.hess,
        }
    }

    pub fn scale(&self, s: f64) -> Jet2 {
        Jet2 {
            value: self.value * s,
            grad: &self.grad * s,
            hess: &self.hess * s,
        }
    }

    pub fn mul(&self, other: &Jet2) -> Jet2 {
        let p = self.dim();
        let (a, b) = (self.value, other.value);
        let grad = &other.grad * a + &self.grad * b;
        let mut hess = DMatrix::zeros(p, p);
        for i in 0..p {
            for j in i..p {
                // cross terms are summed in a fixed order so (i, j) and (j, i) agree bitwise
                let cross = self.grad[i] * other.grad[j] + self.grad[j] * other.grad[i];
                let h = a * other.hess[(i, j)] + b * self.hess[(i, j)] + cross;
                hess[(i, j)] = h;
                hess[(j, i)] = h;
            }
        }
        Jet2 {
            value: a * b,
            grad,
            hess,
        }
    }

    pub fn recip(&self) -> Jet2 {
        let v = self.value;
        self.chain(1.0 / v, -1.0 / (v * v), 2.0 / (v * v * v))
    }

    pub fn div(&self, other: &Jet2) -> Jet2 {
        // q = a / b, differentiate a = q b to keep the value identical to plain division
        let p = self.dim();
        let b = other.value;
        let q = self.value / b;
        let grad = (&self.grad - &other.grad * q) / b;
        let mut hess = DMatrix::zeros(p, p);
        for i in 0..p {
            for j in i..p {
                let cross = grad[i] * other.grad[j] + grad[j] * other.grad[i];
                let h = (self.hess[(i, j)] - q * other.hess[(i, j)] - cross) / b;
                hess[(i, j)] = h;
                hess[(j, i)] = h;
            }
        }
        Jet2 {
            value: q,
            grad,
            hess,
        }
    }

    pub fn exp(&self) -> Jet2 {
        let e = self.value.exp();
        self.chain(e, e, e)
    }

    pub fn ln(&self) -> Jet2 {
        let v = self.value;
        self.chain(v.ln(), 1.0 / v, -1.0 / (v * v))
    }

    pub fn sqrt(&self) -> Jet2 {
        let s = self.value.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * self.value))
    }

    pub fn powf(&self, e: f64) -> Jet2 {
        let v = self.value;
        if e == 0.0 {
            return Jet2::constant(1.0, self.dim());
        }
        if e == 1.0 {
            return self.clone();
        }
        self.chain(
            v.powf(e),
            e * v.powf(e - 1.0),
            e * (e - 1.0) * v.powf(e - 2.0),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad.iter().all(|v| v.is_finite())
            && self.hess.iter().all(|v| v.is_finite())
    }
}
