fn main() { std::process::exit(skyplan::cli::run()); }
