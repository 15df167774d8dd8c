//! Holds the `acceptance` integration target, which runs full fits
//! against reference values and prints one PASS/FAIL line per check group.
