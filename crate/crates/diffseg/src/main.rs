use std::process::exit;

fn main() {
    exit(diffseg::cli::run(std::env::args_os()))
}
