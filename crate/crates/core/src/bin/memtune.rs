fn main() {
    std::process::exit(memtune::cli::main());
}
