fn main() {
    std::process::exit(pmtkg_cli::dispatch(std::env::args_os()));
}
