use super::Real;

/// A named tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

/// Ordered collection of tensors addressed by index. Layers hold indices into
/// the store so optimizers and serializers see one flat list.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> usize {
        let len: usize = shape.iter().product();
        assert_eq!(value.len(), len, "param length for shape {shape:?}");
        self.params.push(Param { name: name.into(), shape, grad: vec![T::zero(); len], value });
        self.params.len() - 1
    }

    pub fn value(&self, id: usize) -> &[T] {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut [T] {
        &mut self.params[id].value
    }

    pub fn grad_mut(&mut self, id: usize) -> &mut [T] {
        &mut self.params[id].grad
    }

    /// Value of `a` and gradient of `b` at once (split borrow).
    pub fn value_and_grad(&mut self, value_id: usize, grad_id: usize) -> (&[T], &mut [T]) {
        assert_ne!(value_id, grad_id);
        if value_id < grad_id {
            let (lo, hi) = self.params.split_at_mut(grad_id);
            (&lo[value_id].value, &mut hi[0].grad)
        } else {
            let (lo, hi) = self.params.split_at_mut(value_id);
            (&hi[0].value, &mut lo[grad_id].grad)
        }
    }

    pub fn param_mut(&mut self, id: usize) -> &mut Param<T> {
        &mut self.params[id]
    }

    /// Two distinct params mutably at once.
    pub fn pair_mut(&mut self, a: usize, b: usize) -> (&mut Param<T>, &mut Param<T>) {
        assert_ne!(a, b);
        if a < b {
            let (lo, hi) = self.params.split_at_mut(b);
            (&mut lo[a], &mut hi[0])
        } else {
            let (lo, hi) = self.params.split_at_mut(a);
            (&mut hi[0], &mut lo[b])
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }
}
