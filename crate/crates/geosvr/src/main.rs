fn main() {
    std::process::exit(geosvr::cli::run());
}
