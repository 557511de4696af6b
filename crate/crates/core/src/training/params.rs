/// A collection of named, flat parameter tensors visited in a fixed order.
///
/// Gradients, optimizer moments and the parameters themselves all implement
/// this with identical names and lengths, which is what lets Adam and the
/// gradient checker zip them together.
pub trait ParamSet {
    fn tensors(&self) -> Vec<(String, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Copies every parameter into one flat vector, in visiting order.
    fn to_flat(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, t)| t.to_vec()).collect()
    }
}

impl ParamSet for Vec<f64> {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        vec![("x".to_string(), self.as_slice())]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![("x".to_string(), self.as_mut_slice())]
    }
}
