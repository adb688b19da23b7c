pub use chartmark as _core;
