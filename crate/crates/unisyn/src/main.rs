fn main() {
    let result = unisyn::cli::dispatch(std::env::args());
    std::process::exit(result.exit_code);
}
