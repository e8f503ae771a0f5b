//! Small helpers for ambient vectors in R^3.

pub type Vec3 = [f64; 3];

#[inline]
pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn add(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: &Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn axpy(y: &mut Vec3, s: f64, x: &Vec3) {
    y[0] += s * x[0];
    y[1] += s * x[1];
    y[2] += s * x[2];
}

#[inline]
pub fn normalize(a: &Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

/// Projection of `v` onto the tangent plane at the unit vector `x`.
#[inline]
pub fn project(x: &Vec3, v: &Vec3) -> Vec3 {
    let s = dot(x, v);
    [v[0] - s * x[0], v[1] - s * x[1], v[2] - s * x[2]]
}

/// Orthonormal basis of the tangent plane at the unit vector `x`.
pub fn tangent_frame(x: &Vec3) -> (Vec3, Vec3) {
    let ax = x[0].abs();
    let ay = x[1].abs();
    let az = x[2].abs();
    let seed = if ax <= ay && ax <= az {
        [1.0, 0.0, 0.0]
    } else if ay <= az {
        [0.0, 1.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    let e1 = normalize(&project(x, &seed));
    let e2 = cross(x, &e1);
    (e1, e2)
}

/// Great-circle distance, accurate for nearby and nearly antipodal points.
#[inline]
pub fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
    norm(&cross(a, b)).atan2(dot(a, b))
}
