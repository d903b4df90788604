fn main() {
    std::process::exit(l2c::cli::main())
}
