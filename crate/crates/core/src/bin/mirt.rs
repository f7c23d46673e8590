fn main() {
    std::process::exit(mirt_curriculum::cli::run(std::env::args_os()));
}
