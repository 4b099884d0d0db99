//! Flat parameter storage with a deterministic layout.
//!
//! All trainable weights live in one contiguous buffer.  The layout —
//! entry names, shapes, and offsets — is fixed by construction order, so
//! two models built from the same config agree byte-for-byte on where
//! every weight lives.  That single flat buffer is what the optimizer,
//! the finite-difference oracle, and the checkpoint format all see.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{normal, stream, Domain};

/// How an entry is filled when parameters are initialized from a seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitKind {
    /// Normal(0, std), redrawn until within two standard deviations.
    TruncNormal,
    /// All zeros (biases, output heads).
    Zero,
    /// All ones (normalization scales).
    One,
}

/// One named parameter array inside the flat buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub init: InitKind,
}

/// Resolved location of one entry; layers hold these for direct access.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    /// The entry's slice within a parameter or gradient buffer.
    #[inline]
    pub fn of<'a, F>(&self, buf: &'a [F]) -> &'a [F] {
        &buf[self.offset..self.offset + self.len]
    }

    /// Mutable variant of [`Slot::of`].
    #[inline]
    pub fn of_mut<'a, F>(&self, buf: &'a mut [F]) -> &'a mut [F] {
        &mut buf[self.offset..self.offset + self.len]
    }
}

/// Complete description of the parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl ParamLayout {
    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Total scalar count across all entries.
    pub fn total_len(&self) -> usize {
        self.total
    }
}

/// Accumulates entries during network construction.
#[derive(Debug, Default)]
pub struct LayoutBuilder {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        LayoutBuilder::default()
    }

    /// Register a named array and get back its resolved slot.
    ///
    /// # Panics
    /// If `name` was already registered (layer wiring bug).
    pub fn slot(&mut self, name: impl Into<String>, shape: &[usize], init: InitKind) -> Slot {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name: {name}"
        );
        let len: usize = shape.iter().product();
        let slot = Slot {
            offset: self.total,
            len,
        };
        self.entries.push(ParamEntry {
            name,
            shape: shape.to_vec(),
            offset: slot.offset,
            len,
            init,
        });
        self.total += len;
        slot
    }

    pub fn finish(self) -> Arc<ParamLayout> {
        Arc::new(ParamLayout {
            entries: self.entries,
            total: self.total,
        })
    }
}

/// The flat trainable-weight buffer plus its layout.
#[derive(Debug, Clone)]
pub struct ParamStore<F: Real> {
    layout: Arc<ParamLayout>,
    pub data: Vec<F>,
}

impl<F: Real> ParamStore<F> {
    /// All-zero store for the layout.
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let data = vec![F::zero(); layout.total_len()];
        ParamStore { layout, data }
    }

    /// Seeded initialization: each entry draws from its own stream, so
    /// values are independent of every other entry and of buffer order.
    pub fn init(layout: Arc<ParamLayout>, seed: u64, std: f64) -> Self {
        let mut store = ParamStore::zeros(layout.clone());
        for (idx, entry) in layout.entries().iter().enumerate() {
            let slice = &mut store.data[entry.offset..entry.offset + entry.len];
            match entry.init {
                InitKind::Zero => {}
                InitKind::One => slice.fill(F::one()),
                InitKind::TruncNormal => {
                    let mut rng = stream(seed, Domain::ParamInit, idx as u64, 0);
                    for v in slice {
                        *v = F::from_f64(truncated_normal(&mut rng) * std);
                    }
                }
            }
        }
        store
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    /// Total scalar count.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Convert every value to another precision, keeping the layout.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            layout: self.layout.clone(),
            data: self.data.iter().map(|&v| G::from_f64(Real::to_f64(v))).collect(),
        }
    }

    /// Replace the buffer contents; length must match the layout.
    pub fn load_data(&mut self, data: Vec<F>) -> Result<()> {
        if data.len() != self.layout.total_len() {
            return Err(Error::shapes(
                "param buffer",
                &[data.len()],
                &[self.layout.total_len()],
            ));
        }
        self.data = data;
        Ok(())
    }
}

/// Standard normal draw rejected until it lands within two standard deviations.
fn truncated_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let v: f64 = normal(rng);
        if v.abs() <= 2.0 {
            return v;
        }
    }
}
