fn main() {
    std::process::exit(slm_core::cli::cli_main(std::env::args_os()));
}
