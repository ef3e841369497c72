use std::collections::HashMap;

const PAGE_BITS: u32 = 12;
const PAGE_SIZE: usize = 1 << PAGE_BITS;

/// Sparse byte-addressed data memory; unwritten bytes read as zero.
#[derive(Clone, Debug, Default)]
pub struct Memory {
    pages: HashMap<u64, Box<[u8; PAGE_SIZE]>>,
}

impl Memory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn read_u8(&self, addr: u64) -> u8 {
        self.pages
            .get(&(addr >> PAGE_BITS))
            .map_or(0, |p| p[(addr as usize) & (PAGE_SIZE - 1)])
    }

    pub fn write_u8(&mut self, addr: u64, value: u8) {
        let page = self
            .pages
            .entry(addr >> PAGE_BITS)
            .or_insert_with(|| Box::new([0; PAGE_SIZE]));
        page[(addr as usize) & (PAGE_SIZE - 1)] = value;
    }

    /// Little-endian 64-bit read.
    pub fn read_u64(&self, addr: u64) -> u64 {
        let mut bytes = [0u8; 8];
        for (i, b) in bytes.iter_mut().enumerate() {
            *b = self.read_u8(addr.wrapping_add(i as u64));
        }
        u64::from_le_bytes(bytes)
    }

    pub fn write_u64(&mut self, addr: u64, value: u64) {
        for (i, b) in value.to_le_bytes().into_iter().enumerate() {
            self.write_u8(addr.wrapping_add(i as u64), b);
        }
    }

    /// Non-zero bytes in address order.
    pub fn nonzero_bytes(&self) -> Vec<(u64, u8)> {
        let mut out: Vec<(u64, u8)> = self
            .pages
            .iter()
            .flat_map(|(&page, data)| {
                data.iter()
                    .enumerate()
                    .filter(|(_, &b)| b != 0)
                    .map(move |(off, &b)| ((page << PAGE_BITS) | off as u64, b))
            })
            .collect();
        out.sort_unstable();
        out
    }
}

impl PartialEq for Memory {
    fn eq(&self, other: &Self) -> bool {
        let zero = [0u8; PAGE_SIZE];
        let same = |a: &Self, b: &Self| {
            a.pages.iter().all(|(k, page)| match b.pages.get(k) {
                Some(other) => page[..] == other[..],
                None => page[..] == zero[..],
            })
        };
        same(self, other) && same(other, self)
    }
}

impl Eq for Memory {}
