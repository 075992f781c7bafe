use std::collections::VecDeque;

/// FIFO of the most recent embeddings of one tracklet, capped at the TCN
/// receptive field.
#[derive(Clone, Debug)]
pub struct EmbeddingQueue<T> {
    items: VecDeque<Vec<T>>,
    capacity: usize,
    pub last_prediction_tick: Option<u64>,
}

impl<T: Clone> EmbeddingQueue<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        Self { items: VecDeque::with_capacity(capacity + 1), capacity, last_prediction_tick: None }
    }

    pub fn push(&mut self, e: Vec<T>) {
        self.items.push_back(e);
        if self.items.len() > self.capacity {
            self.items.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Contents oldest first.
    pub fn window(&self) -> Vec<&[T]> {
        self.items.iter().map(Vec::as_slice).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drops_oldest_beyond_capacity() {
        let mut q = EmbeddingQueue::new(15);
        for i in 0..20 {
            q.push(vec![i as f64]);
        }
        assert_eq!(q.len(), 15);
        assert_eq!(q.window()[0], &[5.0]);
        assert_eq!(q.window()[14], &[19.0]);
    }
}
