//! Named parameter containers.

use crate::checkpoint::Checkpoint;
use crate::tensor::Matrix;

/// A container of named weight matrices. Names are stable and double as
/// checkpoint keys and optimizer-state keys.
pub trait ParamSet {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, m| n += m.len());
        n
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, m| ok &= m.is_finite());
        ok
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n.to_string()));
        out
    }

    /// Appends every tensor; `(1, n)` tensors whose name ends in a bias or
    /// norm suffix are stored at rank 1.
    fn write_tensors(&self, ck: &mut Checkpoint) {
        self.visit(&mut |name, m| {
            if m.rows() == 1 && is_vector_name(name) {
                ck.push_vector(name, m);
            } else {
                ck.push_matrix(name, m);
            }
        });
    }
}

fn is_vector_name(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    let numbered_bias = last.len() > 1 && last.starts_with('b') && last[1..].bytes().all(|c| c.is_ascii_digit());
    last.starts_with("b_") || numbered_bias || last == "gamma" || last == "beta" || last.starts_with("bias")
}
