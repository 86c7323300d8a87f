fn main() {
    std::process::exit(fl2t::cli::run(std::env::args()));
}
