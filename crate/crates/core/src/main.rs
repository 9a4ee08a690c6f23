fn main() {
    std::process::exit(attrprior::cli::run(std::env::args_os()));
}
