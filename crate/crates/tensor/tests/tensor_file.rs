use ddatr_tensor::{io, Tensor};
use proptest::prelude::*;

proptest! {
    #[test]
    fn f64_files_round_trip_bit_exactly(
        shape in prop::collection::vec(1usize..5, 0..4),
        seed in any::<u64>(),
    ) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
        let t = Tensor::new(shape, data).unwrap();
        let back: Tensor<f64> = io::decode(&io::encode(&t)).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn file_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ddtr");
    let t = Tensor::<f32>::new(vec![1, 2, 2], vec![0.0, 0.25, 0.5, 1.0]).unwrap();
    io::write(&path, &t).unwrap();
    assert_eq!(io::read::<f32>(&path).unwrap(), t);
}
