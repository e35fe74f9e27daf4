//! Elementwise activations; backward passes take the cached forward output or input.

pub const LEAKY_SLOPE: f32 = 0.2;

pub fn leaky_relu(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// `dy * lrelu'(a)` where `y` is the activation output (same sign as the input).
pub fn leaky_relu_backward(y: &[f32], dy: &mut [f32]) {
    for (d, &o) in dy.iter_mut().zip(y) {
        if o < 0.0 {
            *d *= LEAKY_SLOPE;
        }
    }
}

pub fn relu(x: &mut [f32]) {
    for v in x {
        *v = v.max(0.0);
    }
}

pub fn relu_backward(y: &[f32], dy: &mut [f32]) {
    for (d, &o) in dy.iter_mut().zip(y) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
}

pub fn tanh(x: &mut [f32]) {
    for v in x {
        *v = v.tanh();
    }
}

pub fn tanh_backward(y: &[f32], dy: &mut [f32]) {
    for (d, &o) in dy.iter_mut().zip(y) {
        *d *= 1.0 - o * o;
    }
}

pub fn sigmoid(x: &mut [f32]) {
    for v in x {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
}

pub fn sigmoid_backward(y: &[f32], dy: &mut [f32]) {
    for (d, &o) in dy.iter_mut().zip(y) {
        *d *= o * (1.0 - o);
    }
}

/// Column-wise softmax of feature-major logits `[K, B]`.
pub fn softmax_columns(logits: &[f32], classes: usize) -> Vec<f32> {
    let b = logits.len() / classes;
    let mut out = vec![0.0; logits.len()];
    for s in 0..b {
        let mut m = f32::NEG_INFINITY;
        for k in 0..classes {
            m = m.max(logits[k * b + s]);
        }
        let mut z = 0.0;
        for k in 0..classes {
            let e = (logits[k * b + s] - m).exp();
            out[k * b + s] = e;
            z += e;
        }
        for k in 0..classes {
            out[k * b + s] /= z;
        }
    }
    out
}
