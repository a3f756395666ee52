use ndarray::ArrayD;

/// A trainable tensor with its gradient accumulator and Adam moment state.
pub struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
    pub m: ArrayD<f32>,
    pub v: ArrayD<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: ArrayD<f32>) -> Self {
        let zeros = ArrayD::zeros(value.raw_dim());
        Param {
            name: name.into(),
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Adam with bias correction. First-moment decay 0.5 by default, the usual
/// choice for GAN training stability.
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    /// One update over every parameter visited in this call.
    pub fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut Param>) {
        self.step += 1;
        for p in params {
            self.update_one(p);
        }
    }

    /// One update pass driven by a network's parameter visitor.
    pub fn step_visit(&mut self, visit: impl FnOnce(&mut dyn FnMut(&mut Param))) {
        self.step += 1;
        visit(&mut |p| self.update_one(p));
    }

    fn update_one(&self, p: &mut Param) {
        let t = self.step as f32;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        {
            azip(&mut p.m, &p.grad, |m, g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g
            });
            azip(&mut p.v, &p.grad, |v, g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g
            });
            let (m, v, value) = (&p.m, &p.v, &mut p.value);
            ndarray::Zip::from(value)
                .and(m)
                .and(v)
                .for_each(|w, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

fn azip(a: &mut ArrayD<f32>, b: &ArrayD<f32>, f: impl Fn(&mut f32, f32)) {
    ndarray::Zip::from(a).and(b).for_each(|x, &y| f(x, y));
}
