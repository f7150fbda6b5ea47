use std::collections::BTreeMap;

use super::{AdapterPair, LoraStateDict};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weighted FedAvg over the adapter factors: every `A` and `B` entry becomes
/// `Σ_c (n_c / N) · θ_c`.
///
/// Updates are summed in a canonical order (by `n_c`, then serialized
/// bytes), so the result does not depend on the order clients report in.
/// When all weights are equal the plain elementwise mean is used.
pub fn fedavg(updates: &[(LoraStateDict, usize)]) -> Result<LoraStateDict> {
    let (first, _) = updates
        .first()
        .ok_or_else(|| Error::Protocol("nothing to aggregate".into()))?;
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::Protocol("aggregation weights sum to zero".into()));
    }
    for (i, (u, _)) in updates.iter().enumerate().skip(1) {
        if u.fingerprint() != first.fingerprint() {
            return Err(Error::Protocol(format!("update {i} was trained against a different base model")));
        }
        if let Some(key) = divergent_key(first, u) {
            return Err(Error::Protocol(format!("update {i} disagrees on adapter `{key}`")));
        }
        for (k, p) in first.iter() {
            let q = u.get(k).expect("key sets match");
            if p.a.shape() != q.a.shape() || p.b.shape() != q.b.shape() {
                return Err(Error::Protocol(format!("update {i} has a different shape for adapter `{k}`")));
            }
        }
    }

    let bytes: Vec<Vec<u8>> = updates.iter().map(|(u, _)| u.to_bytes()).collect();
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by(|&i, &j| updates[i].1.cmp(&updates[j].1).then_with(|| bytes[i].cmp(&bytes[j])));

    let equal = updates.iter().all(|(_, n)| *n == updates[0].1);
    let k = updates.len() as f64;
    let combine = |pick: &dyn Fn(&AdapterPair) -> &Tensor, key: &str| -> Tensor {
        let mut out = vec![0.0; pick(first.get(key).unwrap()).len()];
        for &i in &order {
            let (u, n) = &updates[i];
            let w = *n as f64 / total as f64;
            for (o, v) in out.iter_mut().zip(pick(u.get(key).unwrap()).data()) {
                *o += if equal { *v } else { w * v };
            }
        }
        if equal {
            out.iter_mut().for_each(|o| *o /= k);
        }
        Tensor::new(pick(first.get(key).unwrap()).shape(), out).expect("shape preserved")
    };

    let entries: BTreeMap<String, AdapterPair> = first
        .keys()
        .map(|key| {
            let a = combine(&|p: &AdapterPair| &p.a, key);
            let b = combine(&|p: &AdapterPair| &p.b, key);
            (key.clone(), AdapterPair { a, b })
        })
        .collect();
    Ok(LoraStateDict::new(*first.fingerprint(), entries))
}

/// First key (in sorted order) present in exactly one of the two dicts.
fn divergent_key(x: &LoraStateDict, y: &LoraStateDict) -> Option<String> {
    let mut xs = x.keys().peekable();
    let mut ys = y.keys().peekable();
    loop {
        match (xs.peek(), ys.peek()) {
            (None, None) => return None,
            (Some(a), None) => return Some((*a).clone()),
            (None, Some(b)) => return Some((*b).clone()),
            (Some(a), Some(b)) => match a.cmp(b) {
                std::cmp::Ordering::Equal => {
                    xs.next();
                    ys.next();
                }
                std::cmp::Ordering::Less => return Some((*a).clone()),
                std::cmp::Ordering::Greater => return Some((*b).clone()),
            },
        }
    }
}
