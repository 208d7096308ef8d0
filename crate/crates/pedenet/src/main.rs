fn main() {
    std::process::exit(pedenet::cli::main());
}
