//! The `exprsaug` command line. [`run`] takes an argument vector and returns
//! the process exit status: 0 success, 2 usage or configuration error,
//! 3 data error, 4 numeric failure.

pub mod args;
pub mod config;
mod commands;
mod output;

use std::ffi::OsString;

use exprsaug::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let parsed = match config::parse(argv.into_iter().map(Into::into).collect()) {
        Ok(Ok(p)) => p,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match commands::execute(parsed) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
