use msta_core::metagen::adaptive_simpson;

fn main() {
    let rho: f64 = -0.9;
    let d = 1.0 - rho * rho;
    let joint = move |x: f64, y: f64| {
        let q = (x * x - 2.0 * rho * x * y + y * y) / (2.0 * d);
        (-q).exp() / (2.0 * std::f64::consts::PI * d.sqrt())
    };
    let phi = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let f_of = |x: f64| -> f64 {
        let integrand = move |y: f64| -> msta_core::Result<f64> {
            let p = joint(x, y);
            if p <= 0.0 { return Ok(0.0); }
            let denom = phi(x) * phi(y);
            if denom <= 0.0 { return Ok(0.0); }
            Ok(p * (p / denom).ln())
        };
        adaptive_simpson(&integrand, -8.5, 8.5, 2.9e-6, 45).unwrap()
    };
    // fixed-grid Simpson over outer, 4097 points
    let n = 4096usize;
    let h = 17.0 / n as f64;
    let mut acc = 0.0;
    for i in 0..=n {
        let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f_of(-8.5 + i as f64 * h);
    }
    println!("fixed-grid outer = {:.8}", acc * h / 3.0);
    // adaptive over halves
    let outer = |x: f64| -> msta_core::Result<f64> { Ok(f_of(x)) };
    for (a, b) in [(-8.5, 0.0), (0.0, 8.5), (-8.5, 8.5)] {
        let v = adaptive_simpson(&outer, a, b, 2.5e-5, 45).unwrap();
        println!("adaptive [{a}, {b}] = {v:.8}");
    }
}
