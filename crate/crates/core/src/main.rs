fn main() {
    std::process::exit(itmn::cli::run(std::env::args_os()));
}
