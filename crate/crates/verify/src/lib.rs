//! Acceptance checks for the capgap workspace. The checks live in the
//! `acceptance` test target and print one PASS/FAIL line per criterion.
