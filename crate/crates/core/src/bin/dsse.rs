fn main() {
    std::process::exit(dsse::cli::run(std::env::args_os()));
}
