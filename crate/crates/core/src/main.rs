fn main() {
    std::process::exit(equirestore::cli::run(std::env::args_os()));
}
