//! Host crate for the `acceptance` test binary.
