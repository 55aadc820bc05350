fn main() {
    std::process::exit(ssr_core::cli::run(std::env::args_os()));
}
