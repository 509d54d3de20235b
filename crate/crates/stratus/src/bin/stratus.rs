fn main() { std::process::exit(stratus::cli::run()); }
