fn main() {
    std::process::exit(eptrack::cli::cli_main(std::env::args_os()));
}
