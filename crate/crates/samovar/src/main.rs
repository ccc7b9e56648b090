fn main() {
    std::process::exit(samovar::cli::run_main());
}
