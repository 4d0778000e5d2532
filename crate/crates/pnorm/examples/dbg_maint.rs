use nalgebra::{DMatrix, DVector};
use pnorm::invmaint::MaintainedInverse;
use pnorm::quad::Resistances;

fn main() {
    let m = 20;
    let n = 3;
    let a = DMatrix::from_fn(n, m, |i, j| ((i * m + j) as f64 * 0.7).cos());
    let g = DVector::from_fn(m, |e, _| 0.4 + ((e as f64) * 0.11).sin().abs());
    let mut a_hat = DMatrix::<f64>::zeros(n + 1, m);
    a_hat.rows_mut(0, n).copy_from(&a);
    a_hat.row_mut(n).copy_from(&g.transpose());
    let r = Resistances::new(DVector::from_element(m, 1.5)).unwrap();
    match MaintainedInverse::init(a_hat.transpose(), &r, true) {
        Ok(_) => println!("init ok"),
        Err(e) => println!("init err: {e}"),
    }
}
