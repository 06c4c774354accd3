use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Real;
use crate::tensor::Tensor;

/// Kaiming-uniform draw: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Real>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    assert!(fan_in > 0, "fan_in must be positive");
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel)
        .map(|_| T::of(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("shape/data length agree by construction")
}

/// Fan-in of a conv kernel `Co x Ci x kh x kw` or linear weight `O x I`.
pub fn fan_in(shape: &[usize]) -> usize {
    match shape.len() {
        2 => shape[1],
        4 => shape[1] * shape[2] * shape[3],
        _ => shape.iter().skip(1).product::<usize>().max(1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn draws_stay_inside_bound_and_replay() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t: Tensor<f64> = kaiming_uniform(&mut rng, vec![8, 4], 4);
        let bound = (6.0_f64 / 4.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() < bound));
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let t2: Tensor<f64> = kaiming_uniform(&mut rng2, vec![8, 4], 4);
        assert_eq!(t.data(), t2.data());
    }
}
