use crate::error::{Error, Result};
use crate::mask::SoftMaskStack;

#[derive(Clone, Debug)]
pub struct BankEntry<P> {
    pub frame: usize,
    pub payload: P,
    pub mask: SoftMaskStack,
}

/// Reference frames for propagation: the initial frame, pinned, plus a
/// sliding window of the `window` most recent frames.
#[derive(Clone, Debug)]
pub struct ReferenceBank<P> {
    window: usize,
    entries: Vec<BankEntry<P>>,
}

impl<P> ReferenceBank<P> {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            entries: Vec::with_capacity(window + 1),
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn capacity(&self) -> usize {
        self.window + 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in insertion order; the first is the initial frame.
    pub fn entries(&self) -> &[BankEntry<P>] {
        &self.entries
    }

    pub fn frames(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.frame).collect()
    }

    pub fn masks(&self) -> Vec<&SoftMaskStack> {
        self.entries.iter().map(|e| &e.mask).collect()
    }

    /// Adds a frame, evicting the oldest non-initial entry when the window is
    /// full. Frames must arrive in increasing order.
    pub fn insert(&mut self, frame: usize, payload: P, mask: SoftMaskStack) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if frame <= last.frame {
                return Err(Error::OutOfOrderFrame {
                    frame,
                    last: last.frame,
                });
            }
            if let Some(first) = self.entries.first() {
                if mask.channels != first.mask.channels
                    || mask.height != first.mask.height
                    || mask.width != first.mask.width
                {
                    return Err(Error::Shape("bank mask shape changed".into()));
                }
            }
        }
        let entry = BankEntry {
            frame,
            payload,
            mask,
        };
        if self.entries.is_empty() {
            self.entries.push(entry);
            return Ok(());
        }
        if self.window == 0 {
            return Ok(());
        }
        if self.entries.len() == self.capacity() {
            self.entries.remove(1);
        }
        self.entries.push(entry);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask() -> SoftMaskStack {
        SoftMaskStack::zeros(2, 1, 1)
    }

    #[test]
    fn window_keeps_initial_and_recent() {
        let mut b = ReferenceBank::new(7);
        for f in 0..=10 {
            b.insert(f, (), mask()).unwrap();
        }
        assert_eq!(b.frames(), vec![0, 4, 5, 6, 7, 8, 9, 10]);
    }

    #[test]
    fn zero_window_holds_initial_only() {
        let mut b = ReferenceBank::new(0);
        for f in 0..5 {
            b.insert(f, (), mask()).unwrap();
        }
        assert_eq!(b.frames(), vec![0]);
    }

    #[test]
    fn rejects_out_of_order() {
        let mut b = ReferenceBank::new(3);
        b.insert(0, (), mask()).unwrap();
        b.insert(2, (), mask()).unwrap();
        assert!(matches!(
            b.insert(2, (), mask()),
            Err(Error::OutOfOrderFrame { frame: 2, last: 2 })
        ));
        assert!(b.insert(1, (), mask()).is_err());
        assert!(b.insert(3, (), SoftMaskStack::zeros(3, 1, 1)).is_err());
    }

    #[test]
    fn capacity_bound_over_many_insertions() {
        let mut b = ReferenceBank::new(7);
        for f in 0..1000 {
            b.insert(f, f, mask()).unwrap();
            assert!(b.len() <= b.capacity());
            assert_eq!(b.entries()[0].frame, 0);
        }
    }

    proptest! {
        #[test]
        fn bank_matches_window_arithmetic(window in 0usize..12, last in 0usize..60) {
            let mut b = ReferenceBank::new(window);
            for f in 0..=last {
                b.insert(f, (), mask()).unwrap();
            }
            let lo = (last + 1).saturating_sub(window).max(1);
            let mut expect = vec![0];
            expect.extend(lo..=last);
            prop_assert_eq!(b.frames(), expect);
        }
    }
}
