use super::Geometry;

/// Row of the system matrix for the ray `x cos(theta) + y sin(theta) = s`:
/// `(pixel index, intersection length)` pairs, all lengths positive.
///
/// A ray lying exactly on a pixel boundary line is split evenly between the
/// pixels on either side.
pub(super) fn trace(g: &Geometry, theta: f64, s: f64) -> Vec<(u32, f64)> {
    let (mut c, mut sn) = (theta.cos(), theta.sin());
    if c.abs() < 1e-12 {
        c = 0.0;
        sn = sn.signum();
    }
    if sn.abs() < 1e-12 {
        sn = 0.0;
        c = c.signum();
    }
    let origin = (s * c, s * sn);
    let dir = (-sn, c);
    let p = g.pixel_spacing;
    let xmin = -(g.image_width as f64) * p / 2.0;
    let ymax = g.image_height as f64 * p / 2.0;

    let on_grid = |offset: f64| {
        let r = offset / p;
        (r - r.round()).abs() < 1e-9
    };
    let shift = 1e-6 * p;
    if dir.0 == 0.0 && on_grid(origin.0 - xmin) {
        let mut row = trace_line(g, (origin.0 - shift, origin.1), dir, 0.5);
        row.extend(trace_line(g, (origin.0 + shift, origin.1), dir, 0.5));
        return row;
    }
    if dir.1 == 0.0 && on_grid(ymax - origin.1) {
        let mut row = trace_line(g, (origin.0, origin.1 - shift), dir, 0.5);
        row.extend(trace_line(g, (origin.0, origin.1 + shift), dir, 0.5));
        return row;
    }
    trace_line(g, origin, dir, 1.0)
}

fn slab(origin: f64, dir: f64, lo: f64, hi: f64) -> Option<(f64, f64)> {
    if dir == 0.0 {
        return (lo..hi).contains(&origin).then_some((f64::NEG_INFINITY, f64::INFINITY));
    }
    let (a, b) = ((lo - origin) / dir, (hi - origin) / dir);
    Some((a.min(b), a.max(b)))
}

fn trace_line(g: &Geometry, origin: (f64, f64), dir: (f64, f64), weight: f64) -> Vec<(u32, f64)> {
    let p = g.pixel_spacing;
    let (w, h) = (g.image_width, g.image_height);
    let xmin = -(w as f64) * p / 2.0;
    let ymin = -(h as f64) * p / 2.0;
    let (xmax, ymax) = (-xmin, -ymin);

    let Some((tx0, tx1)) = slab(origin.0, dir.0, xmin, xmax) else {
        return Vec::new();
    };
    let Some((ty0, ty1)) = slab(origin.1, dir.1, ymin, ymax) else {
        return Vec::new();
    };
    let (tmin, tmax) = (tx0.max(ty0), tx1.min(ty1));
    if tmax - tmin <= 1e-12 * p {
        return Vec::new();
    }

    let mut ts = Vec::with_capacity(w + h + 2);
    ts.push(tmin);
    if dir.0 != 0.0 {
        for k in 0..=w {
            let t = (xmin + k as f64 * p - origin.0) / dir.0;
            if t > tmin && t < tmax {
                ts.push(t);
            }
        }
    }
    if dir.1 != 0.0 {
        for k in 0..=h {
            let t = (ymin + k as f64 * p - origin.1) / dir.1;
            if t > tmin && t < tmax {
                ts.push(t);
            }
        }
    }
    ts.push(tmax);
    ts.sort_by(f64::total_cmp);

    let mut row: Vec<(u32, f64)> = Vec::with_capacity(ts.len());
    for pair in ts.windows(2) {
        let len = pair[1] - pair[0];
        if len <= 1e-12 * p {
            continue;
        }
        let tm = 0.5 * (pair[0] + pair[1]);
        let (xm, ym) = (origin.0 + tm * dir.0, origin.1 + tm * dir.1);
        let col = (((xm - xmin) / p).floor() as isize).clamp(0, w as isize - 1) as usize;
        let r = (((ymax - ym) / p).floor() as isize).clamp(0, h as isize - 1) as usize;
        let idx = (r * w + col) as u32;
        match row.last_mut() {
            Some((last, acc)) if *last == idx => *acc += weight * len,
            _ => row.push((idx, weight * len)),
        }
    }
    row
}
