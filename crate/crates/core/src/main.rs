fn main() {
    std::process::exit(jemlab::cli::run(std::env::args_os()));
}
