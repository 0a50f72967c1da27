#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "collapse_lab/error.hpp"
#include "collapse_lab/experiments/experiments.hpp"
#include "collapse_lab/gufm/gufm.hpp"
#include "collapse_lab/io/container.hpp"
#include "collapse_lab/io/json_reader.hpp"
#include "collapse_lab/metrics/metrics.hpp"
#include "collapse_lab/synthesis/synthesis.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace collapse_lab;

namespace {

enum Exit { ok = 0, verification_failed = 1, usage = 2, numerical = 3 };

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = ".";
    std::optional<unsigned> threads;

    [[nodiscard]] unsigned thread_count(unsigned fallback) const {
        if (threads) return *threads;
        if (const char* env = std::getenv("COLLAPSE_LAB_THREADS")) {
            try {
                return static_cast<unsigned>(std::stoul(env));
            } catch (const std::exception&) {
                throw Error(ErrorKind::Config, "COLLAPSE_LAB_THREADS is not an integer");
            }
        }
        return fallback;
    }
};

json load_config(const Globals& g) {
    if (g.config.empty()) return json::object();
    std::ifstream in(g.config);
    require(in.good(), ErrorKind::Config, "cannot open config file " + g.config);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw Error(ErrorKind::Config, g.config + ": " + e.what());
    }
}

fs::path out_path(const Globals& g, const std::string& name) {
    std::error_code ec;
    fs::create_directories(g.out, ec);
    require(!ec, ErrorKind::Io, "cannot create output directory " + g.out);
    return fs::path(g.out) / name;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), ErrorKind::Io, "cannot write " + path.string());
    out << text;
    require(out.good(), ErrorKind::Io, "write failed: " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json to_json(const NCReport& r) {
    return {{"nc1", r.nc1}, {"nc2a", r.nc2a}, {"nc2b", r.nc2b}, {"nc3", r.nc3},
            {"nc2", r.which_nc2 == Nc2Kind::a ? "nc2a" : "nc2b"}};
}

json to_json(const TrendResult& t) {
    return {{"depths", t.depths}, {"median_log10", t.median_log10}, {"spearman", t.spearman},
            {"slope", t.slope}};
}

GufmLoss parse_gufm_loss(const std::string& s) {
    if (s == "ce") return GufmLoss::ce;
    if (s == "mse") return GufmLoss::mse;
    throw Error(ErrorKind::Config, "gufm loss must be ce or mse");
}

// ---------------------------------------------------------------- gufm

int cmd_gufm(const Globals& g) {
    const json cfg = load_config(g);
    io::JsonReader r(cfg, "gufm");
    Index K = 4, n = 5, d = 8;
    double lambda = 0.01, tolerance = 1e-8;
    std::string loss = "ce", method = "closed_form";
    NumericOptions numeric;
    r.get("K", K);
    r.get("n", n);
    r.get("d", d);
    r.get("lambda", lambda);
    r.get("loss", loss);
    r.get("method", method);
    r.get("tolerance", tolerance);
    if (const auto* nj = r.child("numeric")) {
        io::JsonReader nr(*nj, "gufm.numeric");
        std::string rule = "curvature";
        nr.get("restarts", numeric.restarts);
        nr.get("steps", numeric.steps);
        nr.get("step_scale", numeric.step_scale);
        nr.get("rule", rule);
        nr.finish();
        if (rule == "curvature") {
            numeric.rule = StepRule::curvature;
        } else if (rule == "decaying") {
            numeric.rule = StepRule::decaying;
        } else {
            throw Error(ErrorKind::Config, "gufm.numeric.rule must be curvature or decaying");
        }
    }
    r.finish();
    require(method == "closed_form" || method == "numeric", ErrorKind::Config,
            "gufm.method must be closed_form or numeric");
    numeric.seed = g.seed.value_or(0);
    numeric.threads = g.thread_count(0);

    const GufmProblem problem = make_gufm_problem(K, n, d, lambda, parse_gufm_loss(loss));
    const GufmSolution s =
        method == "numeric" ? solve_numeric(problem, numeric) : solve_closed_form(problem);

    io::Container c;
    c.kind = "gufm_solution";
    c.meta = {{"K", K}, {"n", n}, {"d", d}, {"lambda", lambda}, {"loss", loss}};
    c.tensors = {{"W", s.W}, {"X", s.X}};
    io::write_container(out_path(g, "solution.clab"), c);

    const NCReport& cert = s.certificate;
    const bool passed = cert.nc1 <= tolerance && cert.nc2() <= tolerance && cert.nc3 <= tolerance;
    json j = to_json(cert);
    j["loss"] = s.loss;
    j["method"] = method;
    j["tolerance"] = tolerance;
    j["passed"] = passed;
    write_json(out_path(g, "certificate.json"), j);
    std::cout << j.dump(2) << "\n";
    return passed ? ok : verification_failed;
}

// ---------------------------------------------------------------- metrics

Matrix read_matrix_csv(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::Io, "cannot open " + path);
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            try {
                row.push_back(std::stod(cell));
            } catch (const std::exception&) {
                throw Error(ErrorKind::Io, path + ": not a number: '" + cell + "'");
            }
        }
        require(rows.empty() || row.size() == rows.front().size(), ErrorKind::ShapeMismatch,
                path + ": ragged rows");
        rows.push_back(std::move(row));
    }
    require(!rows.empty(), ErrorKind::Io, path + ": empty matrix");
    Matrix M(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
    for (Index i = 0; i < M.rows(); ++i) {
        for (Index j = 0; j < M.cols(); ++j) M(i, j) = rows[i][j];
    }
    return M;
}

// CSV, or a container's tensor `name` (its first tensor if absent).
Matrix read_matrix(const std::string& path, const std::string& name) {
    if (fs::path(path).extension() != ".clab") return read_matrix_csv(path);
    const io::Container c = io::read_container(path);
    for (const auto& t : c.tensors) {
        if (t.name == name) return t.value;
    }
    require(!c.tensors.empty(), ErrorKind::Io, path + ": container has no tensors");
    return c.tensors.front().value;
}

int cmd_metrics(const Globals& g, const std::string& features, const std::string& weights,
                const std::string& labels_path, const std::string& loss, bool last_bias,
                const std::string& etf) {
    const Matrix H = read_matrix(features, "X");
    const Matrix W = read_matrix(weights, "W");
    const Matrix raw = read_matrix_csv(labels_path);
    Labels labels;
    for (Index i = 0; i < raw.size(); ++i) {
        const double v = raw.data()[i];
        require(v >= 0.0 && v == static_cast<double>(static_cast<int>(v)), ErrorKind::Io,
                labels_path + ": labels must be non-negative integers");
        labels.push_back(static_cast<int>(v));
    }
    require(etf == "centered" || etf == "literal", ErrorKind::Config,
            "--etf must be centered or literal");
    const NCReport r = report(W, H, labels, parse_loss_kind(loss), last_bias,
                              etf == "centered" ? EtfForm::centered : EtfForm::literal);
    const json j = to_json(r);
    write_json(out_path(g, "metrics.json"), j);
    write_text(out_path(g, "metrics.csv"),
               "nc1,nc2a,nc2b,nc3\n" + format_real(r.nc1) + "," + format_real(r.nc2a) + "," +
                   format_real(r.nc2b) + "," + format_real(r.nc3) + "\n");
    std::cout << j.dump(2) << "\n";
    return ok;
}

// ---------------------------------------------------------------- synthesis

struct SynthesisJob {
    SynthesisConfig config;
    LossKind loss = LossKind::ce;
    Index width = 8;
    DataSpec data;
    std::vector<Index> grid;
};

SynthesisJob parse_synthesis(const json& cfg, const Globals& g, bool with_grid) {
    SynthesisJob job;
    job.data.classes = 3;
    job.data.per_class = 2;
    job.data.input_dim = 8;
    job.data.vocab = 3;
    job.data.context = 3;
    job.data.sequences = 4;
    io::JsonReader r(cfg, with_grid ? "gapcurve" : "synthesize");
    std::string variant = "rn1", loss = "ce";
    r.get("variant", variant);
    r.get("loss", loss);
    r.get("L1", job.config.L1);
    r.get("L2", job.config.L2);
    r.get("lambda", job.config.lambda);
    r.get("width", job.width);
    r.get("gamma", job.config.gamma);
    r.get("theta", job.config.theta);
    if (with_grid) {
        job.grid = {10, 20, 40, 80};
        r.get("grid", job.grid);
    }
    if (const auto* pj = r.child("plan")) {
        io::JsonReader pr(*pj, "plan");
        pr.get("c", job.config.plan.c);
        pr.get("m_floor", job.config.plan.m_floor);
        pr.get("detour_retries", job.config.plan.detour_retries);
        pr.get("c_raises", job.config.plan.c_raises);
        pr.finish();
    }
    if (const auto* dj = r.child("data")) {
        io::JsonReader dr(*dj, "data");
        dr.get("classes", job.data.classes);
        dr.get("per_class", job.data.per_class);
        dr.get("input_dim", job.data.input_dim);
        dr.get("vocab", job.data.vocab);
        dr.get("context", job.data.context);
        dr.get("sequences", job.data.sequences);
        dr.get("seed", job.data.seed);
        dr.finish();
    }
    r.finish();
    job.config.variant = parse_variant(variant);
    job.loss = parse_loss_kind(loss);
    require(job.loss != LossKind::mse, ErrorKind::Config,
            "synthesis uses the cross-entropy GUFM solution; loss must be ce");
    job.data.language = is_transformer(job.config.variant);
    job.config.seed = g.seed.value_or(0);
    for (Index L : job.grid) require(L >= 1, ErrorKind::Config, "grid values must be positive");
    return job;
}

GufmProblem problem_for(const Dataset& data, const SynthesisJob& job) {
    GufmProblem p;
    p.Y = data.targets();
    p.d = job.width;
    p.lambda = job.config.lambda;
    p.loss = GufmLoss::ce;
    p.classes = data.equivalence;
    return p;
}

int cmd_synthesize(const Globals& g) {
    const SynthesisJob job = parse_synthesis(load_config(g), g, false);
    const Dataset data = make_dataset(job.data);
    const GufmProblem problem = problem_for(data, job);
    const GufmSolution solution = solve_closed_form(problem);
    const Synthesis s = synthesize(data, solution, job.config);
    const VerificationReport report = verify_construction(s, data, solution);
    const ObjectiveValue obj = synthesized_objective(s, data, job.loss, job.config.lambda);

    io::Container c = is_transformer(s.variant) ? io::to_container(s.transformer)
                                                 : io::to_container(s.resnet);
    io::write_container(out_path(g, "network.clab"), c);

    json ledger = s.ledger.to_json();
    ledger["objective"] = obj.total();
    ledger["gufm_objective"] = solution.loss;
    ledger["gap"] = obj.total() - solution.loss;
    ledger["detours"] = s.plan.detours;
    ledger["blocks"] = static_cast<Index>(s.schedule.size());
    write_json(out_path(g, "ledger.json"), ledger);
    json verification = report.to_json();
    write_json(out_path(g, "verification.json"), verification);
    std::cout << "synthesized " << s.schedule.size() << " blocks, gap "
              << format_real(obj.total() - solution.loss) << ", verification "
              << (report.passed() ? "passed" : "FAILED") << "\n";
    for (const auto& a : report.checks) {
        if (!a.passed) std::cerr << "failed: " << a.name << " value=" << a.value << " bound=" << a.bound << "\n";
    }
    return report.passed() ? ok : verification_failed;
}

int cmd_gapcurve(const Globals& g) {
    const SynthesisJob job = parse_synthesis(load_config(g), g, true);
    const Dataset data = make_dataset(job.data);
    const GufmProblem problem = problem_for(data, job);
    const GufmSolution solution = solve_closed_form(problem);
    const std::vector<GapRow> rows = loss_gap_curve(data, solution, problem, job.config, job.grid);

    std::string csv = "L,depth,objective,gufm,gap,hidden_sum\n";
    std::vector<double> Ls, gaps;
    for (const auto& row : rows) {
        csv += std::to_string(row.L1) + "," + std::to_string(row.depth) + "," +
               format_real(row.objective) + "," + format_real(row.gufm) + "," +
               format_real(row.gap) + "," + format_real(row.hidden_sum) + "\n";
        Ls.push_back(static_cast<double>(row.L1));
        gaps.push_back(row.gap);
    }
    write_text(out_path(g, "gapcurve.csv"), csv);
    bool positive = true;
    for (double v : gaps) positive = positive && v > 0.0;
    json j = {{"rows", static_cast<Index>(rows.size())}};
    j["loglog_slope"] = positive && rows.size() >= 2 ? json(loglog_slope(Ls, gaps)) : json(nullptr);
    write_json(out_path(g, "gapcurve.json"), j);
    std::cout << csv;
    return ok;
}

// ---------------------------------------------------------------- training

TrainConfig train_config(const json& j, const Globals& g) {
    TrainConfig c = train_config_from_json(j);
    if (g.seed) c.master_seed = *g.seed;
    c.threads = g.thread_count(c.threads);
    return c;
}

json trends(const std::vector<SweepRow>& rows) {
    json t = json::object();
    if (rows.empty()) return t;
    for (const char* name : {"nc1", "nc2a", "nc2b", "nc3"}) {
        t[name] = to_json(trend_test(rows, parse_metric(name)));
    }
    return t;
}

int cmd_sweep(const Globals& g) {
    const TrainConfig c = train_config(load_config(g), g);
    const SweepResult result = depth_sweep(c);
    write_text(out_path(g, "sweep.csv"), sweep_csv(result.rows));
    json side = {{"config", to_json(c)}, {"dropped", result.dropped}, {"trends", trends(result.rows)}};
    side["config"].erase("threads");
    write_json(out_path(g, "sweep.json"), side);
    std::cout << result.rows.size() << " runs, " << result.dropped << " dropped\n";
    return ok;
}

int cmd_flatness(const Globals& g) {
    const json cfg = load_config(g);
    io::JsonReader r(cfg, "flatness");
    const json* train_j = r.child("train");
    const json* contrast_j = r.child("contrast");
    r.finish();
    const TrainConfig train = train_config(train_j ? *train_j : json::object(), g);
    const FlatnessResult f = flatness_experiment(train);
    write_text(out_path(g, "flatness.csv"), sweep_csv(f.sweep.rows));
    json j = {{"config", to_json(train)},   {"dropped", f.sweep.dropped},
              {"trend", to_json(f.trend)},  {"spread", f.spread},
              {"end_drop", f.end_drop}};
    j["config"].erase("threads");
    if (contrast_j) {
        const TrainConfig contrast = train_config(*contrast_j, g);
        const FlatnessResult cf = flatness_experiment(contrast);
        write_text(out_path(g, "flatness_contrast.csv"), sweep_csv(cf.sweep.rows));
        json cj = {{"config", to_json(contrast)}, {"dropped", cf.sweep.dropped},
                   {"trend", to_json(cf.trend)},  {"spread", cf.spread},
                   {"end_drop", cf.end_drop}};
        cj["config"].erase("threads");
        j["contrast"] = cj;
        j["end_drop_ratio"] = cf.end_drop > 0.0 ? json(f.end_drop / cf.end_drop) : json(nullptr);
    }
    write_json(out_path(g, "flatness.json"), j);
    std::cout << "spread " << format_real(f.spread) << ", end drop " << format_real(f.end_drop) << "\n";
    return ok;
}

// ---------------------------------------------------------------- gradcheck

int cmd_gradcheck(const Globals& g) {
    const json cfg = load_config(g);
    io::JsonReader r(cfg, "gradcheck");
    Index d = 8, L = 3, N = 4;
    double step = 1e-4, tolerance = 1e-5;
    std::vector<std::string> variants{"rn1", "rn2", "t11", "t12", "t21", "t22"};
    std::vector<std::string> placements{"pre", "post"};
    std::vector<std::string> losses{"ce", "mse"};
    r.get("d", d);
    r.get("L", L);
    r.get("N", N);
    r.get("step", step);
    r.get("tolerance", tolerance);
    r.get("variants", variants);
    r.get("placements", placements);
    r.get("losses", losses);
    r.finish();

    json rows = json::array();
    double worst = 0.0;
    for (const auto& v : variants) {
        for (const auto& p : placements) {
            for (const auto& l : losses) {
                const GradCheckResult res =
                    gradcheck_architecture(parse_variant(v), parse_placement(p), parse_loss_kind(l),
                                           d, L, N, g.seed.value_or(0), step);
                worst = std::max(worst, res.max_relative_error);
                rows.push_back({{"variant", v},
                                {"placement", p},
                                {"loss", l},
                                {"max_relative_error", res.max_relative_error},
                                {"coordinates", res.coordinates}});
            }
        }
    }
    const json j = {{"results", rows}, {"max_relative_error", worst}, {"tolerance", tolerance},
                    {"passed", worst < tolerance}};
    write_json(out_path(g, "gradcheck.json"), j);
    std::cout << j.dump(2) << "\n";
    return worst < tolerance ? ok : verification_failed;
}

int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Config:
        case ErrorKind::Io:
        case ErrorKind::ShapeMismatch:
        case ErrorKind::Unbalanced:
        case ErrorKind::DimensionTooSmall:
            return usage;
        case ErrorKind::CollisionPersists:
        case ErrorKind::MarginBelowFloor:
            return verification_failed;
        default:
            return numerical;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Neural-collapse lab: GUFM solver, network synthesis and depth sweeps"};
    app.require_subcommand(1);
    Globals g;
    std::uint64_t seed = 0;
    unsigned threads = 0;
    app.add_option("--config", g.config, "JSON config file");
    auto* seed_opt = app.add_option("--seed", seed, "master seed");
    app.add_option("--out", g.out, "output directory")->capture_default_str();
    auto* threads_opt = app.add_option("--threads", threads, "worker threads (0: all cores)");

    auto* gufm = app.add_subcommand("gufm", "solve the GUFM and certify collapse");
    auto* metrics = app.add_subcommand("metrics", "NC metrics of given features and weights");
    std::string features, weights, labels, loss = "ce", etf = "centered";
    bool last_bias = false;
    metrics->add_option("--features", features, "d x N features (CSV or .clab)")->required();
    metrics->add_option("--weights", weights, "K x d last-layer weights (CSV or .clab)")->required();
    metrics->add_option("--labels", labels, "CSV of N integer labels")->required();
    metrics->add_option("--loss", loss, "ce, mse or wl")->capture_default_str();
    metrics->add_option("--etf", etf, "NC2A reference: centered or literal")->capture_default_str();
    metrics->add_flag("--last-bias", last_bias, "the classifier has a bias");
    auto* synth = app.add_subcommand("synthesize", "construct and verify a collapsed deep network");
    auto* gap = app.add_subcommand("gapcurve", "loss gap of the construction against depth");
    auto* sweep = app.add_subcommand("sweep", "train across depths and seeds");
    auto* grad = app.add_subcommand("gradcheck", "finite-difference check per architecture");
    auto* flat = app.add_subcommand("flatness", "NC1 across depths under a lambda schedule");
    for (auto* sub : {gufm, metrics, synth, gap, sweep, grad, flat}) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? ok : usage;
    }
    if (*seed_opt) g.seed = seed;
    if (*threads_opt) g.threads = threads;

    try {
        if (*gufm) return cmd_gufm(g);
        if (*metrics) return cmd_metrics(g, features, weights, labels, loss, last_bias, etf);
        if (*synth) return cmd_synthesize(g);
        if (*gap) return cmd_gapcurve(g);
        if (*sweep) return cmd_sweep(g);
        if (*grad) return cmd_gradcheck(g);
        if (*flat) return cmd_flatness(g);
    } catch (const Error& e) {
        std::cerr << "collapse_lab: " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "collapse_lab: " << e.what() << "\n";
        return usage;
    }
    return usage;
}
