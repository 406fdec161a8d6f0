#include <sys/wait.h>

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "freenet/render.hpp"
#include "test_util.hpp"

namespace {

struct CmdResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// Runs the installed command-line binary with stdout/stderr captured.
CmdResult run_cli(const std::string& args) {
  static int call_id = 0;
  const std::string base = testutil::scratch_dir() + "/cli_io_" + std::to_string(call_id++);
  const std::string cmd = std::string("\"") + FREENET_CLI_PATH + "\" " + args + " >" + base + ".out 2>" + base + ".err";
  const int status = std::system(cmd.c_str());
  CmdResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(base + ".out");
  r.err = slurp(base + ".err");
  return r;
}

std::string stem(const std::string& tag) { return testutil::scratch_dir() + "/cli_" + tag; }

// Value following `key ` on the line that starts with it.
std::string line_value(const std::string& text, const std::string& key) {
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line))
    if (line.rfind(key + " ", 0) == 0) return line.substr(key.size() + 1);
  FAIL("no line starting with '" << key << "' in:\n" << text);
  return {};
}

std::int64_t line_int(const std::string& text, const std::string& key) {
  return std::stoll(line_value(text, key));
}

}  // namespace

TEST_CASE("gen-synthetic writes a deterministic scene triple") {
  const auto a = run_cli("gen-synthetic --out " + stem("gen_a") + " --seed 7");
  REQUIRE(a.code == 0);
  CHECK(a.out.find("64x64, 4 classes") != std::string::npos);
  CHECK(a.out.find("class 1: 1024 pixels") != std::string::npos);
  CHECK(a.out.find("class 4: 1024 pixels") != std::string::npos);

  const auto b = run_cli("gen-synthetic --out " + stem("gen_b") + " --seed 7");
  REQUIRE(b.code == 0);
  for (const char* ext : {".hdr", ".cube", ".labels"})
    CHECK(slurp(stem("gen_a") + ext) == slurp(stem("gen_b") + ext));

  const auto c = run_cli("gen-synthetic --out " + stem("gen_c") + " --seed 8");
  REQUIRE(c.code == 0);
  CHECK(slurp(stem("gen_a") + ".cube") != slurp(stem("gen_c") + ".cube"));
}

TEST_CASE("train, predict and evaluate close the loop on a small scene") {
  const std::string scene = stem("pipe_scene");
  REQUIRE(run_cli("gen-synthetic --out " + scene + " --height 24 --width 24 --bands 5 --classes 3"
                  " --noise-sigma 0.05 --seed 3").code == 0);

  const std::string ckpt = stem("pipe_ckpt");
  const std::string log = stem("pipe_log.txt");
  const std::string sched = stem("pipe_sched.txt");
  const auto tr = run_cli("train --scene " + scene + " --out " + ckpt + " --iters 4 --beta 0.125 --alpha 4"
                          " --train-per-class 10 --lr 1e-3 --seed 3 --log " + log + " --schedule-out " + sched);
  REQUIRE(tr.code == 0);
  CHECK(tr.out.find("model: ") != std::string::npos);
  CHECK(tr.out.find("trained 4 iterations") != std::string::npos);
  CHECK(!slurp(ckpt).empty());
  CHECK(slurp(ckpt).substr(0, 4) == "FPGA");
  CHECK(slurp(ckpt + ".masks").size() == 24u * 24u);

  // iteration log: "iter loss lr seconds", iterations numbered from zero
  {
    std::istringstream is(slurp(log));
    std::string line;
    int want_iter = 0;
    double first_loss = -1;
    while (std::getline(is, line)) {
      std::istringstream fields(line);
      int iter;
      double loss, lr, seconds;
      REQUIRE((fields >> iter >> loss >> lr >> seconds));
      CHECK(iter == want_iter++);
      CHECK(loss > 0);
      CHECK(lr > 0);
      CHECK(seconds >= 0);
      if (first_loss < 0) first_loss = loss;
    }
    CHECK(want_iter == 4);
    CHECK(first_loss > 0);
  }

  // schedule dump: "batch class row col" with batch indices non-decreasing
  {
    std::istringstream is(slurp(sched));
    std::string line;
    int prev_batch = 0, lines = 0;
    while (std::getline(is, line)) {
      std::istringstream fields(line);
      int batch, cls, row, col;
      REQUIRE((fields >> batch >> cls >> row >> col));
      CHECK(batch >= prev_batch);
      prev_batch = batch;
      CHECK(cls >= 1);
      CHECK(cls <= 3);
      CHECK(row >= 0);
      CHECK(row < 24);
      CHECK(col >= 0);
      CHECK(col < 24);
      ++lines;
    }
    CHECK(lines == 30);  // 3 classes x 10 training pixels
  }

  const std::string pred = stem("pipe_pred.raw");
  const std::string map = stem("pipe_map.ppm");
  const auto pr = run_cli("predict --scene " + scene + " --checkpoint " + ckpt + " --beta 0.125 --out " + pred +
                          " --map " + map);
  REQUIRE(pr.code == 0);
  const auto raster = freenet::load_label_raster(pred, 24 * 24);  // dims match the scene exactly
  for (auto v : raster) {
    CHECK(v >= 1);
    CHECK(v <= 3);
  }

  // the rendered map is a binary P6 PPM using the fixed class palette
  const auto ppm = slurp(map);
  const std::string header = "P6\n24 24\n255\n";
  REQUIRE(ppm.substr(0, header.size()) == header);
  REQUIRE(ppm.size() == header.size() + 3u * 24u * 24u);
  for (std::size_t i : {std::size_t(0), std::size_t(17), std::size_t(24u * 24u - 1)}) {
    const auto want = freenet::class_color(raster[i]);
    CHECK(std::uint8_t(ppm[header.size() + 3 * i]) == want.r);
    CHECK(std::uint8_t(ppm[header.size() + 3 * i + 1]) == want.g);
    CHECK(std::uint8_t(ppm[header.size() + 3 * i + 2]) == want.b);
  }

  // predicting again with the same checkpoint reproduces the raster
  const std::string pred2 = stem("pipe_pred2.raw");
  REQUIRE(run_cli("predict --scene " + scene + " --checkpoint " + ckpt + " --beta 0.125 --out " + pred2).code == 0);
  CHECK(slurp(pred) == slurp(pred2));

  const auto ev = run_cli("evaluate --scene " + scene + " --pred " + pred + " --masks " + ckpt + ".masks" +
                          " --report " + stem("pipe_report.txt") + " --csv " + stem("pipe_metrics.csv"));
  REQUIRE(ev.code == 0);
  CHECK(ev.out.find("overall_accuracy") != std::string::npos);
  CHECK(ev.out.find("kappa") != std::string::npos);
  CHECK(slurp(stem("pipe_metrics.csv")).rfind("metric,class,name,samples,value", 0) == 0);
  CHECK(slurp(stem("pipe_report.txt")) == ev.out);
}

TEST_CASE("evaluating the ground truth against itself is perfect") {
  const std::string scene = stem("self_scene");
  REQUIRE(run_cli("gen-synthetic --out " + scene + " --height 16 --width 16 --bands 4 --classes 3 --seed 2").code ==
          0);
  const std::string pred = stem("self_pred.raw");
  std::ofstream(pred, std::ios::binary) << slurp(scene + ".labels");  // same payload layout

  const auto ev = run_cli("evaluate --scene " + scene + " --pred " + pred);
  REQUIRE(ev.code == 0);
  CHECK(ev.out.find("overall_accuracy 1.0000") != std::string::npos);
  CHECK(ev.out.find("average_accuracy 1.0000") != std::string::npos);
  CHECK(ev.out.find("kappa 1.0000") != std::string::npos);
}

TEST_CASE("training is reproducible for one seed and varies across seeds") {
  const std::string scene = stem("det_scene");
  REQUIRE(run_cli("gen-synthetic --out " + scene + " --height 16 --width 16 --bands 4 --classes 3 --seed 5").code ==
          0);

  auto train = [&](const std::string& tag, int seed) {
    const std::string out = stem("det_" + tag);
    REQUIRE(run_cli("train --scene " + scene + " --out " + out + " --iters 3 --beta 0.125 --alpha 4"
                    " --train-per-class 8 --seed " + std::to_string(seed) + " --log " + out + ".log").code == 0);
    return out;
  };
  const auto a = train("a", 11), b = train("b", 11), c = train("c", 12);
  CHECK(slurp(a) == slurp(b));
  CHECK(slurp(a + ".masks") == slurp(b + ".masks"));
  CHECK(slurp(a) != slurp(c));

  // logs agree except for the wall-clock column
  std::istringstream la(slurp(a + ".log")), lb(slurp(b + ".log"));
  std::string linea, lineb;
  int lines = 0;
  while (std::getline(la, linea) && std::getline(lb, lineb)) {
    int ia, ib;
    double lossa, lossb, lra, lrb, seca, secb;
    REQUIRE((std::istringstream(linea) >> ia >> lossa >> lra >> seca));
    REQUIRE((std::istringstream(lineb) >> ib >> lossb >> lrb >> secb));
    CHECK(ia == ib);
    CHECK(lossa == lossb);
    CHECK(lra == lrb);
    ++lines;
  }
  CHECK(lines == 3);
}

TEST_CASE("zero training iterations leave the fresh initialization untouched") {
  const std::string scene = stem("zero_scene");
  REQUIRE(run_cli("gen-synthetic --out " + scene + " --height 16 --width 16 --bands 4 --classes 3 --seed 6").code ==
          0);
  auto train = [&](const std::string& tag, int iters) {
    const std::string out = stem("zero_" + tag);
    REQUIRE(run_cli("train --scene " + scene + " --out " + out + " --iters " + std::to_string(iters) +
                    " --beta 0.125 --alpha 4 --train-per-class 8 --seed 4").code == 0);
    return out;
  };
  const auto a = train("a", 0), b = train("b", 0), c = train("c", 2);
  CHECK(slurp(a) == slurp(b));
  CHECK(slurp(a) != slurp(c));
}

TEST_CASE("failures exit nonzero with the cause on standard error") {
  const auto missing = run_cli("train --scene " + stem("nonexistent") + " --out " + stem("never"));
  CHECK(missing.code == 1);
  CHECK(missing.err.find("error:") != std::string::npos);
  CHECK(missing.err.find("nonexistent") != std::string::npos);

  const auto bad_classes = run_cli("gen-synthetic --out " + stem("bad") + " --classes 1");
  CHECK(bad_classes.code == 1);
  CHECK(bad_classes.err.find("error:") != std::string::npos);
  CHECK(bad_classes.err.find("classes") != std::string::npos);

  const auto no_subcommand = run_cli("");
  CHECK(no_subcommand.code != 0);

  // checkpoint built for a different width multiplier
  const std::string scene = stem("err_scene");
  REQUIRE(run_cli("gen-synthetic --out " + scene + " --height 16 --width 16 --bands 4 --classes 3 --seed 9").code ==
          0);
  const std::string ckpt = stem("err_ckpt");
  REQUIRE(run_cli("train --scene " + scene + " --out " + ckpt + " --iters 0 --beta 0.125 --alpha 4"
                  " --train-per-class 8 --seed 9").code == 0);
  const auto mismatch =
      run_cli("predict --scene " + scene + " --checkpoint " + ckpt + " --beta 0.25 --out " + stem("err_pred.raw"));
  CHECK(mismatch.code == 1);
  CHECK(mismatch.err.find("error:") != std::string::npos);

  // a split mask with no test pixels cannot be evaluated
  const std::string all_train = stem("err_all_train.masks");
  std::ofstream(all_train, std::ios::binary) << std::string(16 * 16, char(1));
  std::ofstream(stem("err_truth.raw"), std::ios::binary) << slurp(scene + ".labels");
  const auto empty =
      run_cli("evaluate --scene " + scene + " --pred " + stem("err_truth.raw") + " --masks " + all_train);
  CHECK(empty.code == 1);
  CHECK(empty.err.find("no pixels") != std::string::npos);
}

TEST_CASE("inspect prints the architecture ledger and cost convention") {
  const auto full = run_cli("inspect");  // defaults: 144 bands, 15 classes, 352x1912
  REQUIRE(full.code == 0);
  CHECK(line_int(full.out, "total_params") == 2643471);
  CHECK(full.out.find("stem") != std::string::npos);
  CHECK(full.out.find("head.conv1") != std::string::npos);
  CHECK(full.out.find("convention: 1 MAC = 2 FLOPs") != std::string::npos);
  const double ratio = std::stod(line_value(full.out, "patch_to_patchfree_ratio"));
  CHECK(ratio == doctest::Approx(405.41).epsilon(0.001));

  const auto half = run_cli("inspect --beta 0.5");
  REQUIRE(half.code == 0);
  CHECK(line_int(half.out, "total_params") == 683023);
  CHECK(line_int(half.out, "total_params") < line_int(full.out, "total_params"));
}

TEST_CASE("inspect flop totals scale linearly with pixel count") {
  auto flops_at = [&](int h, int w) {
    const auto r = run_cli("inspect --height " + std::to_string(h) + " --width " + std::to_string(w));
    REQUIRE(r.code == 0);
    return line_int(r.out, "total_flops");
  };
  // the attention blocks spend a fixed amount on their dense stage, so the
  // totals are linear in pixel count only up to that constant
  const double base = double(flops_at(352, 352));
  CHECK(double(flops_at(704, 704)) == doctest::Approx(4 * base).epsilon(1e-6));
  CHECK(double(flops_at(352, 704)) == doctest::Approx(2 * base).epsilon(1e-6));
}
