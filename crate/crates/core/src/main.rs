fn main() {
    std::process::exit(hirm::cli::run(std::env::args_os()));
}
